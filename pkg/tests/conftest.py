from contextlib import contextmanager

import numpy as np
import pytest

from ifbench.dataio import PreprocessParams, ToyPlateConfig, generate_toy_plate, load_plate


@pytest.fixture(scope="session")
def toy_plate(tmp_path_factory):
    """One small toy plate: 6 wells (one per MoA group) x 2 sites."""
    root = tmp_path_factory.mktemp("toy")
    cfg = ToyPlateConfig(plate_barcode="TOYT0001", wells_per_group=1, sites_per_well=2)
    plate_dir, manifest = generate_toy_plate(cfg, seed=3, out_root=root)
    return plate_dir, manifest


@pytest.fixture(scope="session")
def toy_pairs(toy_plate):
    return load_plate(toy_plate[1], PreprocessParams(target_size=64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def criterion():
    @contextmanager
    def record(number: int, title: str):
        info: dict = {}
        try:
            yield info
        except BaseException as e:
            msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
            ACCEPTANCE[number] = ("FAIL", title, f"{msg} {_fmt(info)}".strip())
            raise
        ACCEPTANCE[number] = ("PASS", title, _fmt(info))

    return record


def _fmt(info: dict) -> str:
    return ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))
