try:
    from ._version import version
    from ._version import version_tuple
except ImportError:  # pragma: no cover
    version = "0.0.0"
    version_tuple = (0, 0, 0)

from . import geom  # noqa: E402
from . import scenegen  # noqa: E402
from . import geotrans  # noqa: E402
from . import connector  # noqa: E402
from . import policy  # noqa: E402
from . import simrobot  # noqa: E402
from . import config  # noqa: E402
from . import plot  # noqa: E402
