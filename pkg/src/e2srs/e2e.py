"""RIC, agent and xApp in one process, talking over loopback sockets."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

from .agent import E2Agent, ReplaySummary
from .dataset import load_dataset
from .geometry import Geometry
from .model import ModelBundle
from .preprocess import PreprocessConfig
from .ric import RicServer
from .xapp import LocalizationXApp, PredictionRecord, truth_table

log = logging.getLogger(__name__)


@dataclass
class E2eResult:
    records: list[PredictionRecord]
    replay: ReplaySummary
    received: int
    skipped: int
    ric_stats: dict


def run_e2e(dataset_path, bundle: ModelBundle, geometry: Geometry, out_csv=None, rate_hz: float = 100.0,
            loop: bool = False, max_sends: int | None = None, window: int = 5,
            preprocess: PreprocessConfig | None = None, host: str = "127.0.0.1",
            drain_timeout: float = 30.0) -> E2eResult:
    dataset = load_dataset(dataset_path)
    dataset.check_layout(geometry.trps_per_ru)
    ric = RicServer(host, 0, 0).start()
    xapp = LocalizationXApp(bundle, geometry, ric.xapp_address, window, preprocess=preprocess,
                            truth=truth_table(dataset))
    agent = E2Agent(*ric.agent_address)
    failure: list[BaseException] = []
    records: list[PredictionRecord] = []

    def consume():
        try:
            records.extend(xapp.run(out_csv))
        except BaseException as exc:  # surfaced on the main thread
            failure.append(exc)

    try:
        xapp.subscribe()
        worker = threading.Thread(target=consume, name="xapp", daemon=True)
        worker.start()
        agent.connect()
        if not agent.wait_subscribed(5.0):
            raise RuntimeError("agent never received the relayed subscription")
        summary = agent.replay(dataset, rate_hz, loop=loop, max_sends=max_sends, stop=xapp.stop,
                               geometry=geometry)
        xapp.expected = summary.sent
        worker.join(drain_timeout)
        if worker.is_alive():
            xapp.stop.set()
            worker.join(5.0)
        if failure:
            raise failure[0]
        stats = ric.stats()
        log.info("e2e sent=%d received=%d records=%d skipped=%d dropped=%d", summary.sent,
                 xapp.received, len(records), xapp.localizer.skipped, stats["dropped"])
        return E2eResult(records, summary, xapp.received, xapp.localizer.skipped, stats)
    finally:
        agent.close()
        xapp.close()
        ric.close()
        dataset.close()
