"""Plain-text formats: configuration files, trajectory files and report
files.  Floats are written with 17 significant digits, which round-trips
IEEE doubles exactly, so rereading a file reproduces the arrays bit for
bit."""

from __future__ import annotations

from typing import Optional, TextIO

import numpy as np

from .core import Configuration, ModelParams
from .dynamics import LocalTimeLedger, TrajectoryRecord


def _f(v: float) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# configurations: header `globules n sigma r_minus r_plus`, then one
# `i x y z r` record per globule


def format_configuration(c: Configuration, params: ModelParams) -> str:
    lines = [
        f"globules {len(c)} {_f(params.sigma)} {_f(params.r_minus)} {_f(params.r_plus)}"
    ]
    for i in range(len(c)):
        x, y, z = c.centers[i]
        lines.append(f"{i} {_f(x)} {_f(y)} {_f(z)} {_f(c.radii[i])}")
    return "\n".join(lines) + "\n"


def save_configuration(path, c: Configuration, params: ModelParams) -> None:
    with open(path, "w") as fh:
        fh.write(format_configuration(c, params))


def parse_configuration(text: str) -> tuple[Configuration, dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "globules" or len(head) != 5:
        raise ValueError("bad configuration header")
    n = int(head[1])
    info = {"sigma": float(head[2]), "r_minus": float(head[3]), "r_plus": float(head[4])}
    if len(lines) - 1 != n:
        raise ValueError(f"header says {n} globules, file has {len(lines) - 1}")
    centers = np.zeros((n, 3))
    radii = np.zeros(n)
    for ln in lines[1:]:
        tok = ln.split()
        i = int(tok[0])
        centers[i] = [float(tok[1]), float(tok[2]), float(tok[3])]
        radii[i] = float(tok[4])
    return Configuration(centers, radii), info


def load_configuration(path) -> tuple[Configuration, dict]:
    with open(path) as fh:
        return parse_configuration(fh.read())


# ---------------------------------------------------------------------------
# trajectories: one header line, then per recorded time the state records
# `t i x y z r` followed by ledger lines `L i j value`, `Lplus i value`,
# `Lminus i value` (nonzero entries, emitted every ledger_every records)


def write_trajectory(fh: TextIO, traj: TrajectoryRecord, ledger_every: int = 1) -> None:
    m = traj.meta
    n = traj.n_globules
    fh.write(
        "trajectory"
        f" n {n} sigma {_f(m['sigma'])} r_minus {_f(m['r_minus'])}"
        f" r_plus {_f(m['r_plus'])} ell {m['ell']} seed {m['seed']}"
        f" dt {_f(m['dt'])} T {_f(m['T'])} stride {m['record_stride']}\n"
    )
    for k, t in enumerate(traj.times):
        ts = _f(t)
        for i in range(n):
            x, y, z = traj.path[k, i, :3]
            fh.write(f"{ts} {i} {_f(x)} {_f(y)} {_f(z)} {_f(traj.path[k, i, 3])}\n")
        if k % ledger_every == 0 or k == len(traj.times) - 1:
            lg = traj.ledgers[k]
            for (i, j), v in sorted(lg.pair.items()):
                if v != 0.0:
                    fh.write(f"L {i} {j} {_f(v)}\n")
            for i in range(n):
                if lg.cap_plus[i] != 0.0:
                    fh.write(f"Lplus {i} {_f(lg.cap_plus[i])}\n")
                if lg.cap_minus[i] != 0.0:
                    fh.write(f"Lminus {i} {_f(lg.cap_minus[i])}\n")


def save_trajectory(path, traj: TrajectoryRecord, ledger_every: int = 1) -> None:
    with open(path, "w") as fh:
        write_trajectory(fh, traj, ledger_every=ledger_every)


def load_trajectory(path) -> TrajectoryRecord:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[0] != "trajectory":
        raise ValueError("bad trajectory header")
    kv = dict(zip(head[1::2], head[2::2]))
    n = int(kv["n"])
    meta = {
        "sigma": float(kv["sigma"]),
        "r_minus": float(kv["r_minus"]),
        "r_plus": float(kv["r_plus"]),
        "ell": int(kv["ell"]),
        "seed": int(kv["seed"]),
        "dt": float(kv["dt"]),
        "T": float(kv["T"]),
        "record_stride": int(kv["stride"]),
    }
    times: list = []
    frames: list = []
    ledgers: list = []
    ledger: Optional[LocalTimeLedger] = None
    for ln in lines[1:]:
        if not ln.strip():
            continue
        tok = ln.split()
        if tok[0] == "L":
            ledger.add_pair(int(tok[1]), int(tok[2]), float(tok[3]))
        elif tok[0] == "Lplus":
            ledger.cap_plus[int(tok[1])] += float(tok[2])
        elif tok[0] == "Lminus":
            ledger.cap_minus[int(tok[1])] += float(tok[2])
        else:
            t = float(tok[0])
            if not times or t != times[-1]:
                times.append(t)
                frames.append(np.zeros((n, 4)))
                ledger = LocalTimeLedger.zeros(n)
                ledgers.append(ledger)
            i = int(tok[1])
            frames[-1][i, :3] = [float(tok[2]), float(tok[3]), float(tok[4])]
            frames[-1][i, 3] = float(tok[5])
    # records without their own ledger block inherit the previous snapshot
    for k in range(1, len(ledgers)):
        if not ledgers[k].pair and not ledgers[k].cap_plus.any() and not ledgers[k].cap_minus.any():
            ledgers[k] = ledgers[k - 1].copy()
    return TrajectoryRecord(
        times=np.array(times),
        path=np.stack(frames, axis=0),
        ledgers=ledgers,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# flat key-value reports


def format_report(entries: dict) -> str:
    return "".join(f"{k} {v}\n" for k, v in entries.items())


def save_report(path, entries: dict) -> None:
    with open(path, "w") as fh:
        fh.write(format_report(entries))


def save_csv(path, header: list, rows: list) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_f(v) if isinstance(v, float) else str(v) for v in row) + "\n")
