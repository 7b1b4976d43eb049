from importlib.metadata import PackageNotFoundError, version

from deepradiomics.analysis import study as study
from deepradiomics.analysis.ml import (
	evaluate_loocv as evaluate_loocv,
)
from deepradiomics.analysis.ml import (
	evaluate_split as evaluate_split,
)
from deepradiomics.analysis.stats import (
	holm_bonferroni as holm_bonferroni,
)
from deepradiomics.analysis.stats import (
	kaplan_meier as kaplan_meier,
)
from deepradiomics.analysis.stats import (
	logrank as logrank,
)
from deepradiomics.core.cnn import (
	init_weights as init_weights,
)
from deepradiomics.core.cnn import (
	load_weights as load_weights,
)
from deepradiomics.core.pipeline import (
	extract_signature as extract_signature,
)
from deepradiomics.core.pipeline import (
	run_cohort as run_cohort,
)
from deepradiomics.core.registries import (
	feature_registry as feature_registry,
)
from deepradiomics.core.registries import (
	step_registry as step_registry,
)
from deepradiomics.core.volume import (
	load_volume as load_volume,
)
from deepradiomics.utils.auxfun import (
	load_features as load_features,
)
from deepradiomics.utils.auxfun import (
	read_config as read_config,
)
from deepradiomics.utils.config_templates import (
	make_config as make_config,
)
from deepradiomics.utils.synthetic import (
	generate_cohort as generate_cohort,
)

try:
	__version__ = version("deepradiomics")
except PackageNotFoundError:
	__version__ = "0+unknown"
