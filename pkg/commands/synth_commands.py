import logging
from pathlib import Path
from typing import Optional

from config import VERSION, RunConfig, effective_config
from errors import InvalidSpec
from storage import write_json
from waveforms import SCENARIOS, SynthSpec, generate_synthetic, save_record, subject_spec

logger = logging.getLogger(__name__)

RECORD_SUFFIX = {"csv": ".csv", "binary": ".bin"}


def base_spec(config: RunConfig, scenario: Optional[str] = None) -> SynthSpec:
    """The [synth] section, on top of a scenario preset when one is named.

    Keys set explicitly (config file or flags) override the preset.
    """
    scenario = scenario or (config.synth.scenario if config.synth.scenario in SCENARIOS else None)
    if scenario is None:
        return config.synth
    explicit = config.synth.model_dump(include=config.synth.model_fields_set - {"scenario"})
    return SynthSpec.for_scenario(scenario, **explicit)


def synthesize_subjects(base: SynthSpec, n_subjects: int, out_dir, fmt: str = "csv") -> dict:
    if n_subjects < 1:
        raise InvalidSpec(f"--subjects must be at least 1, got {n_subjects}")
    if fmt not in RECORD_SUFFIX:
        raise InvalidSpec(f"unknown record format '{fmt}'")
    out_dir = Path(out_dir)
    label = base.scenario if base.scenario in SCENARIOS else "synth"
    subjects = []
    for index in range(n_subjects):
        spec = subject_spec(base, index)
        subject_id = f"{label}-{index:02d}"
        record = generate_synthetic(spec, subject_id=subject_id)
        filename = f"{subject_id}{RECORD_SUFFIX[fmt]}"
        save_record(record, out_dir / filename, format=fmt)
        subjects.append({"subject_id": subject_id, "file": filename, "scenario": base.scenario,
                         "seed": spec.seed, "sample_rate_hz": spec.sample_rate_hz, "n_beats": spec.n_beats})
        logger.info(f"Synthesised {subject_id} ({record.n_samples} samples) -> {out_dir / filename}")
    return {"scenario": base.scenario, "format": fmt, "subjects": subjects, "synth": base.model_dump(mode="json")}


# ------------------ synth ------------------
def run_synth(args, config: RunConfig) -> int:
    base = base_spec(config, args.scenario)
    manifest = synthesize_subjects(base, args.subjects, args.out, args.format)
    manifest.update(effective_config=effective_config(config), version=VERSION)
    path = write_json(Path(args.out) / "manifest.json", manifest)
    logger.info(f"Wrote {len(manifest['subjects'])} subject record(s) and manifest {path}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="Generate synthetic ECG/PPG/ABP subject records")
    parser.add_argument("--subjects", type=int, default=1, help="Number of subjects to generate")
    parser.add_argument("--scenario", choices=sorted(SCENARIOS), default=None, help="Recording scenario preset")
    parser.add_argument("--format", choices=sorted(RECORD_SUFFIX), default="csv")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.set_defaults(handler=run_synth, overrides=lambda args: {})
