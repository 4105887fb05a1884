__version__ = "0.1.0"

from . import errors
from . import data
from . import dataset
from . import networks
from . import mixup
from . import modeling
from . import measure
from . import pseudo_loop
from . import experiments
from . import config
