import argparse
import io
import json
import os
import shutil
import sys

from logging import (
    getLogger,
    Filter,
    Formatter,
    Handler,
    StreamHandler,
)

from typing import Callable, Dict, List, Optional, Tuple
from textwrap import shorten
from dotenv import load_dotenv

from . import __version__
from .common.errors import (
    AnalysisError,
    ConfigError,
    Diagnostic,
    InputError,
    InsufficientDataError,
    MissingTickerError,
    FitError,
)
from .common.exit_codes import EX_OK, EX_INPUT, EX_IOERROR, EX_INTERRUPTED
from .config import Config
from .correlation_engine import (
    DENSE,
    SIGNIFICANT,
    STATISTIC_D,
    STATISTIC_FISHER_Z,
    compute_influence_tensor,
    correlation_matrix,
    index_scatter,
    partial_correlation_matrix,
    write_tensor_binary,
    write_tensor_csv,
)
from .extensions import extensions, PCINF
from .ext.stage_timer import StageTimerExtension
from .influence_metrics import (
    FILTERED,
    UNFILTERED,
    rank_by_influence,
    read_influence_matrix,
    stock_influence,
    stream_stock_influence,
    total_influence,
    write_influence_matrix,
    write_ranking,
)
from .manifest import RunManifest
from .market_data import (
    PANEL_CSV,
    PANEL_META,
    filter_illiquid,
    flat_fractions,
    load_prices,
    log_returns,
    read_return_panel,
    write_ingest_log,
    write_liquidity_reports,
    write_return_panel,
)
from .sector_influence import (
    attribute_matrix,
    load_sectors,
    prediction_rate,
    rolling_sector_attribution,
    sector_closeness,
    write_attribution,
    write_closeness,
    write_prediction_rates,
    write_rolling_attribution,
)
from .significance import (
    FISHER,
    apply_significance,
    fisher_thresholds,
    sample_null,
    write_decisions,
    write_null_moments,
    write_threshold_table,
)
from .stability_analysis import (
    decay_fit,
    quarter_calendar,
    quarterly_rankings,
    tau_matrix,
    write_calendar,
    write_decay_fit,
    write_quarterly_rankings,
    write_tau_matrix,
)

INGEST = "ingest"
INFLUENCE = "influence"
STABILITY = "stability"
SECTORS = "sectors"
REPORT = "report"

PRECISION_WARNING = "E_PRECISION"

PCINF_FILE_CANDIDATES = ["./pcinf.yml", "./pcinf.yaml"]

stage_timer = StageTimerExtension()

_handler: Optional[Handler] = None


class StageFilter(Filter):
    """
    supplies the ``stage`` attribute for records of foreign loggers
    """

    def filter(self, record):
        if not hasattr(record, "stage"):
            record.stage = record.name
        return True


def load_config(config_file: Optional[str] = None, config_stream: Optional[io.TextIOBase] = None) -> Tuple[Config, str]:
    """
    Loads the configuration file

    The file is taken from the argument, the environment variable ``PCINF_CONFIG``
    or the default locations ``./pcinf.yml`` and ``./pcinf.yaml`` in this order.
    Without a file, the default configuration is used.

    :param config_file: the file given on the command line, defaults to None
    :type config_file: Optional[str], optional
    :param config_stream: the configuration as text stream, defaults to None
    :type config_stream: Optional[io.TextIOBase], optional
    :raises ConfigError: if the given file does not exist or is invalid
    :return: the configuration and a description of its location
    :rtype: Tuple[Config, str]
    """
    if config_stream is not None:
        return Config.load(config_stream), "stream"

    source = "Argument"

    PCINF_CONFIG = "PCINF_CONFIG"

    if not config_file and os.environ.get(PCINF_CONFIG):
        config_file = os.environ[PCINF_CONFIG]
        source = f"Environment {PCINF_CONFIG}"

    if not config_file:
        for candidate in PCINF_FILE_CANDIDATES:
            if os.path.exists(candidate):
                config_file = candidate
                source = "Default location"
                break

    if not config_file:
        return Config.create(), "defaults"

    if not os.path.isfile(config_file):
        raise ConfigError(f"Configuration file {config_file} not found")

    with open(config_file, "r", encoding="utf-8") as f:
        config = Config.load(f)  # type: ignore

    return config, f"file {config_file}, source: {source}."


def set_up_logger(config: Config):
    """
    Sets up the root logger

    :param config: the configuration
    :type config: Config
    :return: the pcinf logger
    :rtype: Logger
    """
    global _handler

    assert config.run
    root_logger = getLogger()

    if _handler is not None:
        root_logger.removeHandler(_handler)

    handler = StreamHandler()
    handler.setFormatter(Formatter(config.run.logformat))
    handler.addFilter(StageFilter())

    loglevel = config.run.loglevel
    assert isinstance(loglevel, int) or isinstance(loglevel, str)

    root_logger.setLevel(loglevel)
    root_logger.addHandler(handler)
    _handler = handler

    logger = getLogger(PCINF)
    extensions.update_logger(PCINF, logger)
    return logger


def set_up_extensions(config: Config):
    """
    registers the built-in extensions and the configured extension modules,
    then validates and configures each configured extension

    :param config: the configuration
    :type config: Config
    """
    if not extensions.plugin_manager.is_registered(stage_timer):
        extensions.register([stage_timer])

    for name, econf in (config.extensions or {}).items():
        if econf.module:
            extensions.register_module(econf.module)

        assert isinstance(econf.enabled, bool)
        extensions.validate_extension(name, econf.enabled, econf.settings or {})
        extensions.configure_extension(name, econf.enabled, econf.settings or {})


def stage_dir(config: Config, stage: str) -> str:
    assert config.run and config.run.out
    directory = os.path.join(config.run.out, stage)
    os.makedirs(directory, exist_ok=True)
    return directory


def _existing_dir(config: Config, stage: str, marker: str, hint: str) -> str:
    assert config.run and config.run.out
    directory = os.path.join(config.run.out, stage)
    if not os.path.isfile(os.path.join(directory, marker)):
        raise InputError(f"{stage} output not found in {directory}, run '{hint}' first")
    return directory


def _read_panel(config: Config, manifest: RunManifest):
    directory = _existing_dir(config, INGEST, PANEL_CSV, INGEST)
    manifest.add_input("panel/" + PANEL_CSV, os.path.join(directory, PANEL_CSV))
    manifest.add_input("panel/" + PANEL_META, os.path.join(directory, PANEL_META))
    return read_return_panel(directory)


def _manifest(config: Config, stage: str) -> RunManifest:
    return RunManifest(stage=stage, config=config.snapshot())


def _logger(stage: str):
    logger = getLogger(stage)
    extensions.update_logger(stage, logger)
    return logger


def cmd_ingest(config: Config) -> RunManifest:
    """
    loads prices, removes illiquid stocks and writes the return panel,
    the liquidity report and the ingest log
    """
    assert config.inputs and config.ingest
    logger = _logger(INGEST)
    extra = {"stage": INGEST}
    manifest = _manifest(config, INGEST)

    prices_file = config.require_file(config.inputs.prices, "prices")
    manifest.add_input("prices", prices_file)

    index_ticker = config.inputs.index_ticker
    assert index_ticker

    panel = load_prices(prices_file)
    if index_ticker not in panel.tickers:
        raise MissingTickerError(index_ticker, "index ticker", stage=INGEST)

    max_flat_fraction = config.ingest.max_flat_fraction
    zero_volume_is_flat = bool(config.ingest.zero_volume_is_flat)
    assert max_flat_fraction is not None

    # the index never counts as a liquid stock
    stocks = panel.select([t for t in panel.tickers if t != index_ticker])
    filtered, reports = filter_illiquid(stocks, max_flat_fraction, zero_volume_is_flat)

    index_fraction = float(flat_fractions(panel.select([index_ticker]), zero_volume_is_flat)[0])
    if index_fraction > max_flat_fraction:
        logger.warning("index %s is flat on %.4f of days, kept anyway", index_ticker, index_fraction, extra=extra)
    filtered = panel.select([*filtered.tickers, index_ticker], filtered.ingest_log[len(panel.ingest_log) :])

    returns = log_returns(filtered, index_ticker)

    directory = stage_dir(config, INGEST)
    write_return_panel(returns, directory)
    write_liquidity_reports(reports, os.path.join(directory, "liquidity.csv"))
    write_ingest_log(filtered.ingest_log, os.path.join(directory, "ingest_log.jsonl"))

    logger.info(
        "%d stock(s), %d observation(s) written to %s", returns.n_stocks, returns.n_obs, directory, extra=extra
    )

    manifest.add_outputs(directory, [PANEL_CSV, PANEL_META, "liquidity.csv", "ingest_log.jsonl"])
    return manifest


def cmd_influence(config: Config) -> RunManifest:
    """
    computes thresholds, the influence tensor, the influence matrix and the ranking
    """
    assert config.significance and config.influence and config.run
    s = config.significance
    inf = config.influence
    jobs = config.run.jobs
    logger = _logger(INFLUENCE)
    extra = {"stage": INFLUENCE}

    manifest = _manifest(config, INFLUENCE)
    panel = _read_panel(config, manifest)
    directory = stage_dir(config, INFLUENCE)
    outputs: List[str] = []

    def written(name: str) -> str:
        outputs.append(name)
        return os.path.join(directory, name)

    corr = correlation_matrix(panel)
    index_scatter(corr, partial_correlation_matrix(corr)).to_csv(
        written("index_scatter.csv"), index=False, float_format="%.17g", lineterminator="\n"
    )

    null = None
    if s.method == FISHER:
        table = fisher_thresholds(s.levels or [], int(s.tails or 2))
        statistic = STATISTIC_FISHER_Z
    else:
        null = sample_null(panel, s.replicates or 1, s.seed or 0, s.max_triples_per_replicate or 1, s.segment_length,
                           inf.variant or "index", jobs)
        table = null.threshold_table(s.levels or [])
        statistic = STATISTIC_D

    manifest.add_diagnostics(Diagnostic("significance", PRECISION_WARNING, w) for w in table.warnings)
    write_threshold_table(table, written("thresholds.csv"))
    write_null_moments(table, written("null_moments.json"))

    assert s.level is not None
    threshold = table.threshold(s.level)
    logger.info("threshold %.6g at level %s (%s)", threshold, s.level, s.method, extra=extra)

    if inf.storage == DENSE:
        tensor = compute_influence_tensor(panel, DENSE, None, statistic, inf.variant or "index", jobs)
        write_tensor_binary(tensor, written("tensor.pct1"))
        significant, decisions = apply_significance(tensor, table, s.level)
        write_decisions(decisions, written("decisions.csv"))
        logger.info(
            "%.4f of %d triple(s) pass at level %s", decisions.passed_fraction, len(decisions), s.level, extra=extra
        )
        matrix = stock_influence(significant if inf.filtered else tensor, FILTERED if inf.filtered else UNFILTERED)
        empirical = tensor.d
    else:
        significant = compute_influence_tensor(panel, SIGNIFICANT, threshold, statistic, inf.variant or "index", jobs)
        tensor = significant
        if inf.filtered:
            matrix = stock_influence(significant, FILTERED)
        else:
            matrix = stream_stock_influence(panel, None, statistic, inf.variant or "index", jobs)
        empirical = None

    manifest.add_diagnostics(tensor.diagnostics)
    write_tensor_csv(significant, written("tensor.csv"))

    if null is not None:
        null.histogram(empirical=empirical).to_csv(
            written("null_histogram.csv"), index=False, float_format="%.17g", lineterminator="\n"
        )

    write_influence_matrix(matrix, written("influence_matrix.csv"), written("influence_counts.csv"))

    total = total_influence(matrix, inf.direction or "outgoing")
    manifest.add_diagnostics(total.diagnostics)
    write_ranking(rank_by_influence(total.as_dict()), written("ranking.csv"))

    logger.info("%d significant triple(s) of %d", len(significant), significant.evaluated, extra=extra)

    manifest.add_outputs(directory, outputs)
    return manifest


def cmd_stability(config: Config) -> RunManifest:
    """
    ranks stocks per calendar period and fits the decay of the ranking similarity
    """
    assert config.calendar and config.run
    cal = config.calendar
    logger = _logger(STABILITY)
    extra = {"stage": STABILITY}

    manifest = _manifest(config, STABILITY)
    panel = _read_panel(config, manifest)
    directory = stage_dir(config, STABILITY)
    outputs: List[str] = []

    def written(name: str) -> str:
        outputs.append(name)
        return os.path.join(directory, name)

    calendar = quarter_calendar(panel.dates, cal.frequency or "Q", cal.min_days or 1)
    write_calendar(calendar, written("calendar.csv"))

    min_periods = cal.min_periods or 2
    if len(calendar) < min_periods:
        raise InsufficientDataError(
            f"insufficient quarters: {len(calendar)} period(s), {min_periods} required", stage=STABILITY
        )

    series = quarterly_rankings(panel, calendar, config.ranking_options(), config.run.jobs)
    manifest.add_diagnostics(series.diagnostics)

    if len(series.rankings) < min_periods:
        raise InsufficientDataError(
            f"insufficient quarters: {len(series.rankings)} ranked period(s), {min_periods} required",
            stage=STABILITY,
        )

    write_quarterly_rankings(series, written("quarter_rankings.csv"))

    matrix = tau_matrix(series.rankings)
    write_tau_matrix(matrix, written("tau_matrix.csv"))

    try:
        fit = decay_fit(matrix)
        write_decay_fit(fit, written("decay.csv"), written("decay_fit.json"))
    except FitError as e:
        logger.warning(e.message, extra=extra)
        manifest.add_diagnostics([Diagnostic(STABILITY, e.code, e.message)])

    manifest.add_outputs(directory, outputs)
    return manifest


def cmd_sectors(config: Config) -> RunManifest:
    """
    attributes the influence on every stock to sectors and validates the attribution
    """
    assert config.inputs and config.sectors and config.run
    logger = _logger(SECTORS)
    extra = {"stage": SECTORS}

    manifest = _manifest(config, SECTORS)

    sectors_file = config.require_file(config.inputs.sectors, "sectors")
    manifest.add_input("sectors", sectors_file)
    sectors = load_sectors(sectors_file)

    influence_dir = _existing_dir(config, INFLUENCE, "influence_matrix.csv", INFLUENCE)
    matrix_file = os.path.join(influence_dir, "influence_matrix.csv")
    counts_file = os.path.join(influence_dir, "influence_counts.csv")
    manifest.add_input("influence/influence_matrix.csv", matrix_file)
    matrix = read_influence_matrix(matrix_file, counts_file if os.path.isfile(counts_file) else None)

    covering = sectors.covering(matrix.tickers)
    d_vectors, attribution = attribute_matrix(matrix, covering)

    directory = stage_dir(config, SECTORS)
    outputs = ["attribution.csv", "prediction_rates.csv", "closeness.csv"]

    write_attribution(attribution, os.path.join(directory, "attribution.csv"))
    write_prediction_rates(prediction_rate(attribution, covering), os.path.join(directory, "prediction_rates.csv"))
    write_closeness(sector_closeness(d_vectors), os.path.join(directory, "closeness.csv"))

    if config.sectors.window:
        panel = _read_panel(config, manifest)
        windows = rolling_sector_attribution(
            panel, sectors, config.sectors.window, config.sectors.step, config.ranking_options(), config.run.jobs
        )
        write_rolling_attribution(windows, os.path.join(directory, "rolling_attribution.csv"))
        outputs.append("rolling_attribution.csv")
        logger.info("%d rolling window(s)", len(windows), extra=extra)

    logger.info("%d stock(s) in %d sector(s)", len(attribution.tickers), len(attribution.sectors), extra=extra)

    manifest.add_outputs(directory, outputs)
    return manifest


REPORT_FILES = {
    INGEST: ["liquidity.csv"],
    INFLUENCE: [
        "index_scatter.csv",
        "thresholds.csv",
        "null_moments.json",
        "null_histogram.csv",
        "influence_matrix.csv",
        "ranking.csv",
    ],
    STABILITY: ["calendar.csv", "quarter_rankings.csv", "tau_matrix.csv", "decay.csv", "decay_fit.json"],
    SECTORS: ["attribution.csv", "prediction_rates.csv", "closeness.csv", "rolling_attribution.csv"],
}


def cmd_report(config: Config) -> RunManifest:
    """
    copies the plot-ready tables of all stages to ``<out>/report`` and indexes them
    """
    assert config.run and config.run.out
    manifest = _manifest(config, REPORT)
    directory = stage_dir(config, REPORT)

    index: Dict[str, Dict[str, str]] = {}
    for stage, names in REPORT_FILES.items():
        for name in names:
            source = os.path.join(config.run.out, stage, name)
            if not os.path.isfile(source):
                continue
            target = f"{stage}_{name}"
            shutil.copyfile(source, os.path.join(directory, target))
            index[target] = {"stage": stage, "source": f"{stage}/{name}"}

    if not index:
        raise InputError(f"nothing to report in {config.run.out}", stage=REPORT)

    with open(os.path.join(directory, "index.json"), "w", encoding="utf-8") as fp:
        json.dump(index, fp, indent=2, sort_keys=True)
        fp.write("\n")

    manifest.add_outputs(directory, [*sorted(index), "index.json"])
    return manifest


COMMANDS: Dict[str, Callable[[Config], RunManifest]] = {
    INGEST: cmd_ingest,
    INFLUENCE: cmd_influence,
    STABILITY: cmd_stability,
    SECTORS: cmd_sectors,
    REPORT: cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcinf", description="partial correlation influence analysis of equity panels"
    )
    parser.add_argument("--version", action="version", version=f"pcinf {__version__}")

    options = argparse.ArgumentParser(add_help=False)
    options.add_argument("--config", help="the configuration file")
    options.add_argument("--seed", type=int, help="the seed of the shuffle test")
    options.add_argument("--level", type=float, help="the two-tailed significance level")
    options.add_argument("--replicates", type=int, help="number of shuffled panels")
    options.add_argument("--segment-length", dest="segment_length", type=int, help="shuffle segments of this length")
    options.add_argument("--jobs", type=int, help="number of workers")
    options.add_argument("--out", help="the output directory")
    options.add_argument("--method", choices=["shuffle", "fisher"], help="the significance test")
    options.add_argument("--prices", help="the price file")
    options.add_argument("--sectors", help="the sector file")
    options.add_argument("--index-ticker", dest="index_ticker", help="the ticker of the market index")

    commands = parser.add_subparsers(dest="command", metavar="command", required=True)
    commands.add_parser(INGEST, parents=[options], help="load prices and write the return panel")
    commands.add_parser(INFLUENCE, parents=[options], help="compute influences, thresholds and rankings")
    commands.add_parser(STABILITY, parents=[options], help="compare rankings between calendar periods")
    commands.add_parser(SECTORS, parents=[options], help="attribute influence to sectors")
    commands.add_parser(REPORT, parents=[options], help="bundle all plot-ready tables")

    return parser


def _fail(stage: str, code: str, message: str, exit_code: int) -> int:
    print(json.dumps({"stage": stage, "code": code, "message": message}), file=sys.stderr)
    return exit_code


def run(args: Optional[List[str]] = None) -> int:
    """
    pcinf's main routine

    - loads ``.env`` and the configuration file
    - applies command line overrides
    - runs the subcommand and writes its manifest

    :param args: the command line arguments, defaults to ``sys.argv[1:]``
    :type args: Optional[List[str]], optional
    :return: the exit code
    :rtype: int
    """
    parsed = build_parser().parse_args(args)
    stage = parsed.command

    load_dotenv(os.path.join(os.getcwd(), ".env"), override=False)

    try:
        config, location = load_config(parsed.config)
        config.override(
            seed=parsed.seed,
            level=parsed.level,
            replicates=parsed.replicates,
            segment_length=parsed.segment_length,
            jobs=parsed.jobs,
            out=parsed.out,
            method=parsed.method,
            prices=parsed.prices,
            sectors=parsed.sectors,
            index_ticker=parsed.index_ticker,
        )

        logger = set_up_logger(config)
        extra = {"stage": PCINF}

        logger.info("pcinf %s", __version__, extra=extra)
        logger.info("Using configuration %s", location, extra=extra)
        logger.debug("pcinf config: %s", shorten(str(config), width=127, placeholder="..."), extra=extra)

        set_up_extensions(config)

        extensions.stage_started(stage)
        manifest = COMMANDS[stage](config)

        content = manifest.content()
        extensions.stage_finished(stage, content)
        manifest.timings.update(content.get("timings", {}))

        path = manifest.write(stage_dir(config, stage))
        logger.info("%s done, manifest %s", stage, path, extra=extra)

        return EX_OK
    except AnalysisError as e:
        e.with_stage(stage)
        record = e.as_record()
        return _fail(record["stage"], record["code"], record["message"], e.exit_code)
    except OSError as e:
        return _fail(stage, "E_IO", f"I/O Error: {str(e)}", EX_IOERROR)
    except ValueError as e:
        return _fail(stage, "E_INPUT", str(e), EX_INPUT)
    except KeyboardInterrupt:
        return _fail(stage, "E_INTERRUPTED", "pcinf was interrupted", EX_INTERRUPTED)


def main(args: Optional[List[str]] = None):
    sys.exit(run(args))


if __name__ == "__main__":
    main()
