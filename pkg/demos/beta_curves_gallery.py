"""SVG gallery of beta-evolutes and beta-involutes.

    python3 demos/beta_curves_gallery.py --out /tmp/gallery

Writes three SVGs: evolutes of an ellipse for several constant beta, the
involutes d = 1, 2, 3 of a quarter circle, and the ellipse evolute with its
four cusps marked.
"""
import argparse
from pathlib import Path

import numpy as np

from thedra.beta_curves import SampledCurve2, beta_evolute, beta_involute, evolute_singular_params
from thedra.svg import polylines_svg


def ellipse(n=2000, a=2.0, b=1.0):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return SampledCurve2(np.c_[a * np.cos(t), b * np.sin(t)], t, closed=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="gallery")
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)

    e = ellipse()
    layers = [{"points": e.vertices, "label": "ellipse"}]
    layers += [{"points": beta_evolute(e, b)[0], "label": f"beta {b}"} for b in (0.0, 0.3, 0.6)]
    (out / "ellipse_evolutes.svg").write_text(polylines_svg(layers, title="beta-evolutes of an ellipse"))

    t = np.linspace(0, np.pi / 2, 1001)
    arc = SampledCurve2(np.c_[np.cos(t), np.sin(t)], t)
    layers = [{"points": arc.vertices, "label": "quarter circle"}]
    layers += [{"points": beta_involute(arc, np.pi / 4, d), "label": f"d = {d:g}"} for d in (1.0, 2.0, 3.0)]
    (out / "circle_involutes.svg").write_text(polylines_svg(layers, title="beta-involutes, beta = pi/4"))

    rep = evolute_singular_params(e, 0.0)
    ev = beta_evolute(e, 0.0)[0]
    idx = [int(round(p / (2 * np.pi) * len(ev))) % len(ev) for p in rep.params]
    layers = [{"points": ev, "label": "evolute"}, {"points": ev[idx], "label": "cusps", "markers": True}]
    (out / "ellipse_cusps.svg").write_text(polylines_svg(layers, title=f"{len(rep.params)} cusps"))
    print(f"wrote {out}/ellipse_evolutes.svg, circle_involutes.svg, ellipse_cusps.svg; "
          f"cusp parameters {np.round(rep.params, 4).tolist()}")


if __name__ == "__main__":
    main()
