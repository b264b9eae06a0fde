"""dynloc: RGB-D visual localization robust to movable objects.

Subpackages cover the full pipeline: geometry primitives (`geom`), local
features (`features`), global retrieval (`retrieval`), mask taxonomy and the
moving-object criterion (`dynfilter`), map construction (`mapstore`), robust
absolute pose (`pose`), view rendering and photometric verification
(`render`), synthetic dataset generation (`synthgen`), orchestration
(`pipeline`) and evaluation (`evalx`).
"""

__version__ = "0.1.0"
