"""Evaluation metrics, generalization suites, embedding export and the CLI."""

from navdistill.evalkit.embeddings import collect_embeddings, export_embeddings
from navdistill.evalkit.metrics import (
    Agent,
    EpisodeMetrics,
    EvalResult,
    PolicyAgent,
    ScriptedAgent,
    Summary,
    evaluate,
    evaluate_episodes,
    load_agent,
    run_episode,
)
from navdistill.evalkit.suites import (
    SUITE_IDS,
    Setting,
    SuiteConfig,
    SuiteReport,
    noise_header,
    run_suite,
    speed_header,
    suite_config,
    write_report,
)

__all__ = [name for name in dir() if not name.startswith("_")]
