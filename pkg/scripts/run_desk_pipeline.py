"""
Run the whole twin experiment at desk scale.

truth -> obs -> assimilate (original) -> dataset -> train -> skill -> assimilate (hybrid, and
oracle at the same and at a 3 h sampling period) -> report. Every stage writes its manifest
under <out>/manifests, so a second run from the same config reproduces the same artifacts.
"""

import logging
import sys
from pathlib import Path

from qgml.cli import run_command
from qgml.config import ExperimentConfig, load_document, parse_config
from qgml.exceptions import QgmlError

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

ORACLE_SHORT_TAU_HOURS = 3.0


def main() -> None:
    """
    Chain every stage from the config given as the first argument (defaults when absent).

    An optional second argument overrides the output directory.
    """
    document = load_document(Path(sys.argv[1]) if len(sys.argv) > 1 else None)
    if len(sys.argv) > 2:
        document.setdefault("paths", {})["out_dir"] = sys.argv[2]
    config = parse_config(document)

    def with_da(**update: object) -> ExperimentConfig:
        return config.model_copy(update={"da": config.da.model_copy(update=update)})

    steps = [
        ("truth", config),
        ("obs", config),
        ("assimilate", with_da(mode="original")),
        ("dataset", config),
        ("train", config),
        ("skill", config),
        ("assimilate", with_da(mode="hybrid")),
        ("assimilate", with_da(mode="oracle")),
        ("assimilate", with_da(mode="oracle", tau_hours=ORACLE_SHORT_TAU_HOURS)),
        ("report", config),
    ]
    try:
        for stage, stage_config in steps:
            run_command(stage, stage_config, progress=True)
    except QgmlError as e:
        logging.error(f"Pipeline stopped at {stage}: {e}")
        sys.exit(1)
    logging.info(f"Pipeline finished; report at {config.out_dir / 'report' / 'summary.csv'}")


if __name__ == "__main__":
    main()
