"""Rolling-context, coarse-to-fine video latent generation at toy scale.

Submodules: ``latent`` (HLAT files, resampling), ``context`` (rolling history),
``nn`` (toy DiT), ``flow`` and ``sampler`` (pyramid flow matching), ``drift``
(corruption and drift tracking), ``distill``, ``train``, ``bench`` (scoring) and
``cli``.
"""
from .context import MemoryPlan, RollingHistory, paper_plan, toy_plan
from .flow import StageSchedule
from .nn.dit import DitConfig, ToyDiT
from .sampler import cost_report, sample_section

__version__ = "0.1.0"

__all__ = ["DitConfig", "MemoryPlan", "RollingHistory", "StageSchedule", "ToyDiT", "cost_report",
           "paper_plan", "sample_section", "toy_plan", "__version__"]
