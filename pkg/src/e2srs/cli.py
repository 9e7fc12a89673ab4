"""Command-line entry point: synth, train, ric, agent, xapp, eval, e2e, rerun."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, override
from .geometry import Geometry, GeometryError, default_geometry
from .manifest import RunManifest

log = logging.getLogger("e2srs")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class UsageError(Exception):
    pass


def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _geometry(path) -> Geometry:
    return default_geometry() if path is None else Geometry.load(path)


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    from .synth import Trajectory, gen_dataset

    cfg = load_config(args.config)
    channel = override(cfg.channel, seed=args.seed, nlos_prob=args.nlos, snr_db=args.snr)
    geometry = _geometry(args.geometry)
    try:
        trajectory = Trajectory.load(args.trajectory)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"trajectory: {exc}") from None
    result = gen_dataset(geometry, channel, trajectory, args.out)
    manifest = RunManifest("synth", argv, {"channel": channel.to_dict(), "trajectory": args.trajectory,
                                           "geometry": geometry.to_text()}, channel.seed)
    manifest.add(args.out)
    if args.write_geometry:
        geometry.save(args.write_geometry)
        manifest.add(args.write_geometry)
    manifest.write(args.out)
    print(f"wrote {result.num_snapshots} snapshots to {args.out} "
          f"(NLoS links {result.nlos_fraction:.1%}, glitched snapshots {len(result.glitches)})")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .charting import train, write_loss_log
    from .dataset import load_dataset
    from .model import save_params
    from .preprocess import prepare_training_set

    cfg = load_config(args.config)
    tcfg = override(cfg.train, seed=args.seed, epochs=args.epochs)
    geometry = _geometry(args.geometry)
    dataset = load_dataset(args.dataset)
    data = prepare_training_set(dataset, geometry, cfg.preprocess)
    network, history = train(data, geometry, tcfg)
    save_params(network, data.alpha, cfg.preprocess.taps, args.out, n_fft=dataset.n_fft)
    loss_log = Path(str(args.out) + ".loss.csv")
    write_loss_log(history, loss_log)
    manifest = RunManifest("train", argv, {"preprocess": cfg.preprocess.to_dict(), "train": tcfg.to_dict(),
                                           "dataset_sha256": _sha(args.dataset)}, tcfg.seed)
    manifest.add(args.out, loss_log)
    manifest.write(args.out)
    print(f"trained on {len(data)} snapshots ({len(data.dropped)} dropped), final loss "
          f"{history[-1].total:.4f}; weights in {args.out}")
    return EXIT_OK


def _sha(path) -> str:
    from .manifest import sha256_file
    return sha256_file(path)


def cmd_ric(args, argv) -> int:
    from .ric import RicServer, ports_from_env

    agent_port, xapp_port = ports_from_env(args.agent_port, args.xapp_port)
    server = RicServer(args.host, agent_port, xapp_port, args.queue).start()
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(args.stats_every):
            log.info("ric stats %s", " ".join(f"{k}={v}" for k, v in server.stats().items()))
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def cmd_agent(args, argv) -> int:
    from .agent import E2Agent
    from .dataset import load_dataset

    dataset = load_dataset(args.dataset)
    geometry = Geometry.load(args.geometry) if args.geometry else None
    if geometry is not None:
        dataset.check_layout(geometry.trps_per_ru)
    with E2Agent(*args.ric, agent_id=args.agent_id, ue_id=args.ue_id) as agent:
        agent.connect()
        if not agent.wait_subscribed(args.wait):
            log.error("no subscription within %.1f s", args.wait)
            return EXIT_RUNTIME
        try:
            summary = agent.replay(dataset, args.rate, loop=args.loop, max_sends=args.max_sends, geometry=geometry)
        except KeyboardInterrupt:
            return EXIT_OK
    print(f"sent {summary.sent} indications in {summary.duration_s:.3f} s")
    return EXIT_OK


def cmd_xapp(args, argv) -> int:
    from .dataset import load_dataset
    from .model import load_params
    from .xapp import LocalizationXApp, truth_table

    cfg = load_config(args.config)
    bundle = load_params(args.model)
    truth = truth_table(load_dataset(args.truth)) if args.truth else None
    app = LocalizationXApp(bundle, Geometry.load(args.geometry), args.ric, args.window,
                           args.request_id, cfg.preprocess, truth)
    app.expected = args.max_indications
    try:
        app.subscribe()
        records = app.run(args.out)
    except KeyboardInterrupt:
        records = []
    finally:
        app.close()
    manifest = RunManifest("xapp", argv, {"window": args.window, "preprocess": cfg.preprocess.to_dict()},
                           None, deterministic=False)
    manifest.add(args.out)
    manifest.write(args.out)
    print(f"{len(records)} predictions from {app.received} indications written to {args.out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .xapp import evaluate, format_report, read_predictions, write_report_csv

    stats = evaluate(read_predictions(args.predictions), args.grouping, args.use)
    print(format_report(stats))
    if args.out:
        write_report_csv(stats, args.out)
        manifest = RunManifest("eval", argv, {"grouping": args.grouping, "use": args.use}, None)
        manifest.add(args.out)
        manifest.write(args.out)
    return EXIT_OK


def cmd_e2e(args, argv) -> int:
    from .e2e import run_e2e
    from .model import load_params

    cfg = load_config(args.config)
    geometry = Geometry.load(args.geometry)
    bundle = load_params(args.model, expect_taps=cfg.preprocess.taps if args.config else None)
    result = run_e2e(args.dataset, bundle, geometry, args.out, rate_hz=args.rate, loop=args.loop,
                     max_sends=args.max_sends, window=args.window, preprocess=cfg.preprocess)
    manifest = RunManifest("e2e", argv, {"rate_hz": args.rate, "window": args.window, "loop": args.loop,
                                         "preprocess": cfg.preprocess.to_dict()}, None, deterministic=False)
    manifest.add(args.out)
    manifest.write(args.out)
    s = result.ric_stats
    print(f"sent {result.replay.sent}, received {result.received}, records {len(result.records)}, "
          f"skipped {result.skipped}, queue drops {s['dropped']}, unmatched {s['unmatched']}")
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    """Replay the invocation recorded in a manifest and compare artifact digests."""
    manifest = RunManifest.load(args.manifest)
    old = list(manifest.artifacts)
    run_argv = list(manifest.argv)
    if args.out:
        if "--out" not in run_argv:
            raise UsageError("recorded command has no --out to redirect")
        run_argv[run_argv.index("--out") + 1] = str(Path(args.out).resolve())
    here = os.getcwd()
    os.chdir(manifest.cwd or here)
    try:
        status = main(run_argv)
        if status != EXIT_OK:
            return status
        fresh = RunManifest.load(RunManifest.path_for(run_argv[run_argv.index("--out") + 1]))
    finally:
        os.chdir(here)
    if not manifest.deterministic:
        print("re-ran a non-deterministic command; digests not compared")
        return EXIT_OK
    same = [a[1] for a in old] == [a[1] for a in fresh.artifacts]
    for (path, digest), (_, new) in zip(old, fresh.artifacts):
        print(f"{'same' if digest == new else 'DIFFERS'} {path}")
    return EXIT_OK if same else EXIT_RUNTIME


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e2srs", description="SRS channel-charting localization over an E2-style link.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic SRS dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectory", default="testpoints",
                   help="trajectory file, 'testpoints[:N]' or 'survey' (default: testpoints)")
    s.add_argument("--geometry", help="geometry file (default: built-in two-RU layout)")
    s.add_argument("--config", help="INI config file")
    s.add_argument("--seed", type=int)
    s.add_argument("--nlos", type=float, help="NLoS link probability")
    s.add_argument("--snr", type=float, help="SNR in dB")
    s.add_argument("--write-geometry", help="also write the geometry used to this path")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the channel-chart network")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="weight file to write")
    s.add_argument("--geometry")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=_positive(int))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ric", help="run the RIC router")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--agent-port", type=int, help="default 36421 or $E2SRS_AGENT_PORT")
    s.add_argument("--xapp-port", type=int, help="default 36422 or $E2SRS_XAPP_PORT")
    s.add_argument("--queue", type=_positive(int), default=256, help="per-subscriber queue capacity")
    s.add_argument("--stats-every", type=_positive(float), default=10.0, help="seconds between stats lines")
    s.set_defaults(func=cmd_ric)

    s = sub.add_parser("agent", help="replay a dataset as an E2 agent")
    s.add_argument("--dataset", required=True)
    s.add_argument("--ric", type=_endpoint, required=True, help="host:port of the RIC agent listener")
    s.add_argument("--rate", type=_positive(float), default=100.0)
    s.add_argument("--loop", action="store_true")
    s.add_argument("--agent-id", type=int, default=1)
    s.add_argument("--ue-id", type=int, default=1)
    s.add_argument("--max-sends", type=_positive(int))
    s.add_argument("--geometry", help="take RU and TRP ids from this geometry file")
    s.add_argument("--wait", type=_positive(float), default=60.0, help="seconds to wait for a subscription")
    s.set_defaults(func=cmd_agent)

    s = sub.add_parser("xapp", help="run the localization xApp")
    s.add_argument("--ric", type=_endpoint, required=True, help="host:port of the RIC xApp listener")
    s.add_argument("--model", required=True)
    s.add_argument("--geometry", required=True)
    s.add_argument("--window", type=_positive(int), default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--truth", help="dataset whose ground truth is joined by timestamp")
    s.add_argument("--request-id", type=int, default=1)
    s.add_argument("--max-indications", type=_positive(int))
    s.set_defaults(func=cmd_xapp)

    s = sub.add_parser("eval", help="error statistics from a prediction CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--grouping", choices=["testpoint", "global"], default="testpoint")
    s.add_argument("--use", choices=["smooth", "raw"], default="smooth")
    s.add_argument("--out", help="report CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("e2e", help="RIC + agent + xApp in one process over loopback")
    s.add_argument("--dataset", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--geometry", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rate", type=_positive(float), default=100.0)
    s.add_argument("--loop", action="store_true")
    s.add_argument("--max-sends", type=_positive(int))
    s.add_argument("--window", type=_positive(int), default=5)
    s.add_argument("--config")
    s.set_defaults(func=cmd_e2e)

    s = sub.add_parser("rerun", help="repeat the run recorded in a manifest and compare outputs")
    s.add_argument("manifest")
    s.add_argument("--out", help="write the new primary artifact here instead")
    s.set_defaults(func=cmd_rerun)
    return p


_CONFIG_ERRORS = (ConfigError, GeometryError, UsageError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    sub_argv = argv[argv.index(args.command):]
    try:
        status = args.func(args, sub_argv)
    except _CONFIG_ERRORS as exc:
        print(f"e2srs {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a runtime error
        code = getattr(exc, "code", type(exc).__name__)
        print(f"e2srs {args.command}: {code}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return status
