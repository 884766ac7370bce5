from . import app
from . import sweeps
