"""Metrics, estimator pipelines and experiment suites."""
from .experiments import ExperimentConfig, aggregate, preset, run_experiment, stage_table
from .metrics import rrmse, sens_spec
from .pipelines import PipelineConfig, pipeline_cape, pipeline_mmer, pipeline_odrlt, pipeline_rl
