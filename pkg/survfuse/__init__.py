from .version import __version__  # noqa: F401
from .config import RunConfig, load_config  # noqa: F401
from .data_io import Cohort, PatientRecord, load_cohort  # noqa: F401
from .errors import SurvfuseError  # noqa: F401
from .models import AmilModel, MmfModel, SnnModel, build_model  # noqa: F401
from .training import cross_validate, train  # noqa: F401
from .experiment import fusion_experiment, summarize  # noqa: F401
