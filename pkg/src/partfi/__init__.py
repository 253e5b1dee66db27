"""Fault-injection testbed for a simulated static partitioning hypervisor."""

from .campaign import (
    MECHANISTIC,
    CampaignReport,
    EffectMode,
    Outcome,
    TrialLog,
    availability,
    calibrated,
    classify,
    run_campaign,
    run_trial,
)
from .injector import HIGH, MEDIUM, FaultPlan, Target
from .sysconfig import example_config, parse_system_config, validate_system_config
from .workload import default_workload, golden_run

__version__ = "0.1.0"
