"""
This is the rpel package: robust doubly-penalized empirical likelihood for sparse longitudinal marginal models.
"""
__all__ = ['config', 'cli', 'diagnostics', 'estimating', 'io', 'methods', 'optimizer', 'penalties', 'scores', 'simulation', 'tuning', 'utils']
__version__ = '0.1'

# Import config before anything else, so environment flags are read before any module uses them
from . import config

# The following explicit import allows accessing the things in 'core.py' through rpel.<thing_in_core.py>
from .core import *
__all__.extend(core.__all__) # the name 'core' is defined in the namespace after 'from .core import *'

# The following imports allow accessing everything in <name>.py through rpel.<name>.<thing_in_<name>.py>
from . import utils
from . import scores
from . import estimating
from . import penalties
from . import optimizer
from . import tuning
from . import diagnostics
from . import methods
from . import simulation
from . import io
from . import cli

# For ease of use, allow the main entry points to be accessed as 'rpel.fit_method' etc.
__all__.extend(['ModelSpec', 'build_context', 'Penalties', 'SolverOptions', 'solve', 'select', 'fit_method'])
from .estimating import ModelSpec, build_context
from .penalties import Penalties
from .optimizer import SolverOptions, solve
from .tuning import select
from .methods import fit_method
