from ._version import __version__
from .exceptions import *
from .geometry import *
from .autodiff import *
from .skeleton import *
from .segmentation import *
from .synthetic import *
from .field import *
from .nicp import *
from .fitting import *
from .evaluation import *
from .config import *
from .archive import *
