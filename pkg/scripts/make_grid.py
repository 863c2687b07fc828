"""Regenerate the bundled 5x5 grid scenario."""

import json
import sys
from pathlib import Path

N = 5
T_STREET = 3.0
T_ARTERIAL = 2.0
C_DEFAULT = 40.0
TIGHT = ("v21", "v22")
C_TIGHT = 8.0
STATIONS = {"W": "v20", "E": "v24", "N": "v02", "S": "v42"}
RATES = {
    ("W", "E"): 3.0, ("W", "N"): 0.6, ("W", "S"): 0.6,
    ("E", "W"): 0.5, ("E", "N"): 0.3, ("E", "S"): 0.3,
    ("N", "W"): 0.3, ("N", "E"): 0.5, ("N", "S"): 0.4,
    ("S", "W"): 0.3, ("S", "E"): 0.5, ("S", "N"): 0.4,
}


def vid(r, c):
    return f"v{r}{c}"


def build():
    roads = []
    for r in range(N):
        for c in range(N):
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < N and 0 <= cc < N:
                    a, b = vid(r, c), vid(rr, cc)
                    arterial = (r == rr == 2) or (c == cc == 2)
                    roads.append({
                        "id": f"{a}-{b}", "from": a, "to": b,
                        "T": T_ARTERIAL if arterial else T_STREET,
                        "C": C_TIGHT if (a, b) == TIGHT else C_DEFAULT,
                    })
    return {
        "schema_version": 1,
        "name": "grid5x5",
        "description": "5x5 street grid with a faster central cross, one station at the middle of "
                       "each edge and a low-capacity arterial segment (v21->v22) on the busy W->E route.",
        "vertices": [vid(r, c) for r in range(N) for c in range(N)],
        "roads": roads,
        "stations": [{"id": s, "vertex": v} for s, v in STATIONS.items()],
        "demands": [{"origin": s, "destination": t, "rate": lam} for (s, t), lam in RATES.items()],
        "bpr": {"delta": 0.15, "beta": 3},
        "epsilon": 0.1,
    }


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/bcmp_amod/data/grid5x5.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
