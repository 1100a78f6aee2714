"""Regenerates the bundled synthetic feeder, fleet and profile tables.

Usage: python3 generate.py [--check]

The topology follows the IEEE 37-node test feeder (single-phase
equivalent). Impedances use a uniform per-length value on a 4.8 kV,
23.04 MVA base (1 ohm = 1 p.u.). Spot loads are the test-feeder totals
scaled to a ~15 MW system. Profiles are synthetic: an evening-peaking load
shape and a clear-sky PV shape, sampled every 5 minutes.
"""

import math
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
S_BASE = 23.04

# (from, to, length in kft)
SEGMENTS = [
    ("799", "701", 1.85), ("701", "702", 0.96), ("702", "705", 0.40), ("702", "713", 0.36),
    ("702", "703", 1.32), ("703", "727", 0.24), ("703", "730", 0.60), ("704", "714", 0.08),
    ("704", "720", 0.80), ("705", "742", 0.32), ("705", "712", 0.24), ("706", "725", 0.28),
    ("707", "724", 0.76), ("707", "722", 0.12), ("708", "733", 0.32), ("708", "732", 0.32),
    ("709", "731", 0.60), ("709", "708", 0.32), ("710", "735", 0.20), ("710", "736", 1.28),
    ("711", "741", 0.40), ("711", "740", 0.20), ("713", "704", 0.52), ("714", "718", 0.52),
    ("720", "707", 0.92), ("720", "706", 0.60), ("727", "744", 0.28), ("730", "709", 0.20),
    ("733", "734", 0.56), ("734", "737", 0.64), ("734", "710", 0.52), ("737", "738", 0.40),
    ("738", "711", 0.40), ("744", "728", 0.20), ("744", "729", 0.28), ("775", "709", 0.10),
]
# ohm per kft: trunk conductors on the main path, lighter laterals elsewhere
TRUNK = {"799-701", "701-702", "702-703", "703-730", "730-709", "709-708", "708-733",
         "733-734", "734-737", "737-738", "738-711"}
R_TRUNK, X_TRUNK = 0.0110, 0.0080
R_LATERAL, X_LATERAL = 0.0200, 0.0110

# kW totals of the test feeder's spot loads
SPOT_KW = {
    "701": 630, "712": 85, "713": 85, "714": 38, "718": 85, "720": 85, "722": 161, "724": 42,
    "725": 42, "727": 42, "728": 126, "729": 42, "730": 85, "731": 85, "732": 42, "733": 85,
    "734": 42, "735": 85, "736": 42, "737": 140, "738": 126, "740": 85, "741": 42, "742": 93,
    "744": 42,
}
LOAD_SCALE = 6.0
POWER_FACTOR_Q = 0.45

PV = {"709": 0.2, "711": 0.2, "712": 0.2, "713": 0.1, "724": 0.1, "730": 0.2, "734": 0.2, "740": 0.2}
BATTERIES = ["703", "734"]

# far-end nodes that receive the engineered load step
SAG_NODES = ["737", "738", "711", "740", "741"]
SAG_MW = 1.2


def load_shape(hour):
    """Evening-peaking daily load multiplier."""
    base = 0.62 + 0.12 * math.exp(-((hour - 9.0) / 2.5) ** 2) + 0.30 * math.exp(-((hour - 18.5) / 3.0) ** 2)
    return base


def pv_shape(hour):
    """Clear-sky PV multiplier, sunrise 6 h, sunset 19 h, peak near 11 h."""
    if hour <= 6.0 or hour >= 19.0:
        return 0.0
    x = (hour - 6.0) / 13.0
    return math.sin(math.pi * x ** 0.85) ** 1.5


def lines():
    out = []
    for a, b, kft in SEGMENTS:
        key = f"{a}-{b}"
        r, x = (R_TRUNK, X_TRUNK) if key in TRUNK else (R_LATERAL, X_LATERAL)
        out.append((a, b, round(r * kft, 6), round(x * kft, 6)))
    return out


def power_flow(loads_mw, loads_mvar, injections_mw=None, injections_mvar=None):
    """Newton power flow mirroring the library solver; returns (labels, |V|, P0 MW)."""
    ls = lines()
    labels = ["799"]
    for a, b, _, _ in ls:
        for n in (a, b):
            if n not in labels:
                labels.append(n)
    idx = {n: i for i, n in enumerate(labels)}
    n = len(labels)
    Y = np.zeros((n, n), complex)
    for a, b, r, x in ls:
        y = 1 / complex(r, x)
        i, j = idx[a], idx[b]
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    s = np.zeros(n, complex)
    for node, p in loads_mw.items():
        s[idx[node]] -= complex(p, loads_mvar[node]) / S_BASE
    for node, p in (injections_mw or {}).items():
        s[idx[node]] += complex(p, (injections_mvar or {}).get(node, 0.0)) / S_BASE
    vm, va = np.ones(n), np.zeros(n)
    for _ in range(50):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        F = np.concatenate([(S - s).real[1:], (S - s).imag[1:]])
        if np.max(np.abs(F)) < 1e-10:
            break
        I = Y @ V
        dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
        dVm = np.diag(V) @ np.conj(Y @ np.diag(V / np.abs(V))) + np.conj(np.diag(I)) @ np.diag(V / np.abs(V))
        J = np.block([[dVa.real[1:, 1:], dVm.real[1:, 1:]], [dVa.imag[1:, 1:], dVm.imag[1:, 1:]]])
        dx = np.linalg.solve(J, F)
        va[1:] -= dx[: n - 1]
        vm[1:] -= dx[n - 1:]
    V = vm * np.exp(1j * va)
    p0 = (V * np.conj(Y @ V))[0].real * S_BASE
    return labels, vm, p0


def spot_loads(hour, extra=None):
    mult = load_shape(hour)
    p = {k: v * LOAD_SCALE * mult / 1000.0 for k, v in SPOT_KW.items()}
    for node, mw in (extra or {}).items():
        p[node] = p.get(node, 0.0) + mw
    q = {k: POWER_FACTOR_Q * v for k, v in p.items()}
    return p, q


def write_tables():
    with open(HERE / "ieee37_feeder.csv", "w") as f:
        f.write("from,to,r_pu,x_pu\n")
        for a, b, r, x in lines():
            f.write(f"{a},{b},{r},{x}\n")

    with open(HERE / "ieee37_fleet.csv", "w") as f:
        f.write("node,kind,s_max_mva,p_min_mw,p_max_mw,soc_min_mwh,soc_max_mwh,soc_init_mwh,efficiency,"
                "c_p,c_q,c_p_ref,alpha_p,alpha_q\n")
        for node in BATTERIES:
            f.write(f"{node},battery,12,-10,10,0,30,15,0.9,,,,,\n")
        for node, mva in PV.items():
            f.write(f"{node},pv,{mva},,,,,,,,,,,\n")

    times = np.arange(0, 24 * 3600 + 1, 300)
    with open(HERE / "loads_day.csv", "w") as f:
        f.write("t_seconds,node,p_MW,q_MVAr\n")
        for t in times:
            p, q = spot_loads(t / 3600.0)
            for node in SPOT_KW:
                f.write(f"{t},{node},{p[node]:.6f},{q[node]:.6f}\n")

    # sag: the day profile plus a sustained load step at the far end from 15:00
    onset = 15 * 3600
    with open(HERE / "loads_sag.csv", "w") as f:
        f.write("t_seconds,node,p_MW,q_MVAr\n")
        sag_times = sorted(set(times.tolist()) | {onset - 1})
        for t in sag_times:
            extra = {node: SAG_MW for node in SAG_NODES} if t >= onset else None
            p, q = spot_loads(t / 3600.0, extra)
            for node in SPOT_KW:
                f.write(f"{t},{node},{p[node]:.6f},{q[node]:.6f}\n")

    with open(HERE / "pv_day.csv", "w") as f:
        f.write("t_seconds,node,p_available_MW\n")
        for t in times:
            for node, mva in PV.items():
                f.write(f"{t},{node},{0.95 * mva * pv_shape(t / 3600.0):.6f}\n")


def check():
    for hour in (3, 12, 14, 15.5, 18.5):
        p, q = spot_loads(hour)
        labels, vm, p0 = power_flow(p, q)
        print(f"{hour:5.1f} h  load {sum(p.values()):6.2f} MW  P0 {p0:6.2f} MW  "
              f"vmin {vm.min():.4f} at {labels[int(vm.argmin())]}")
    for hour in (15.5, 16.5):
        p, q = spot_loads(hour, {n: SAG_MW for n in SAG_NODES})
        labels, vm, p0 = power_flow(p, q)
        print(f"sag {hour:4.1f} h  load {sum(p.values()):6.2f} MW  P0 {p0:6.2f} MW  vmin {vm.min():.4f} "
              f"({(vm < 0.96).sum()} nodes < 0.96)")
        _, vm_q, _ = power_flow(p, q, {"734": 0.0}, {"734": 8.0})
        print(f"   with 8 MVAr at 734: vmin {vm_q.min():.4f}")


if __name__ == "__main__":
    if "--check" in sys.argv:
        check()
    else:
        write_tables()
        check()
