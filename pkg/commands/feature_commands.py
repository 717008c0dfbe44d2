import logging
from pathlib import Path

from config import RunConfig
from errors import TabForecastError
from features import process_record, save_feature_series
from preprocess import save_annotation_csv
from waveforms import load_record

logger = logging.getLogger(__name__)


# ------------------ features ------------------
def run_features(args, config: RunConfig) -> int:
    try:
        record = load_record(args.input, format=args.format, sample_rate_hz=args.sample_rate,
                             subject_id=args.subject_id)
        processed = process_record(record, config.filters, config.features)
    except TabForecastError as e:
        logger.error(f"{args.input}: {e}")
        raise

    path = save_feature_series(processed.series, args.out)
    logger.info(f"{record.subject_id}: {len(processed.series)} feature rows -> {path}")
    if args.annotations:
        save_annotation_csv(processed.annotation, args.annotations)
        logger.info(f"{record.subject_id}: beat annotations -> {Path(args.annotations)}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("features", help="Filter, segment and extract the per-cycle feature table")
    parser.add_argument("--in", dest="input", required=True, help="Waveform record (CSV or binary)")
    parser.add_argument("--out", required=True, help="Feature table CSV")
    parser.add_argument("--annotations", default=None, help="Optional beat annotation CSV")
    parser.add_argument("--format", choices=("csv", "binary"), default=None)
    parser.add_argument("--sample-rate", type=float, default=None,
                        help="Sample rate for CSV records without a sample_rate_hz header")
    parser.add_argument("--subject-id", default=None)
    parser.set_defaults(handler=run_features, overrides=lambda args: {})
