"""Raster outputs: density/utilization/time maps, trails and stamped frames.

Images are binary PPM (P6, maxval 255).  Grids are indexed (row, col) with
row 0 at the lowest y, so they are flipped vertically when drawn (north up).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import GridSpec, Trace, last_occupied, TIME_EPS

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
NEUTRAL = (128, 128, 128)
MARK = (220, 0, 0)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class ColorRamp:
    stops: tuple  # ((value, (r, g, b)), ...)

    def __post_init__(self):
        stops = tuple((float(v), tuple(int(c) for c in rgb)) for v, rgb in self.stops)
        if len(stops) < 2:
            raise RenderError("a ramp needs at least two stops")
        if any(not (b[0] > a[0]) for a, b in zip(stops, stops[1:])):
            raise RenderError("ramp stop values must be strictly increasing")
        for _, rgb in stops:
            if len(rgb) != 3 or any(not (0 <= c <= 255) for c in rgb):
                raise RenderError(f"bad colour {rgb}")
        object.__setattr__(self, "stops", stops)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.stops])

    @property
    def lo(self) -> float:
        return self.stops[0][0]

    @property
    def hi(self) -> float:
        return self.stops[-1][0]

    def __call__(self, v):
        """RGB for a scalar or an array of values (clamped to the stop range)."""
        arr = np.asarray(v, dtype=float)
        xs = self.values
        out = np.empty(arr.shape + (3,), dtype=np.uint8)
        for c in range(3):
            ys = np.array([rgb[c] for _, rgb in self.stops], dtype=float)
            out[..., c] = np.floor(np.interp(arr, xs, ys) + 0.5).astype(np.uint8)
        return tuple(int(c) for c in out) if out.ndim == 1 else out

    def labels(self):
        return [f"{v:.2f}" for v, _ in self.stops]

    def rescaled(self, lo: float, hi: float) -> "ColorRamp":
        """Same colours, stops mapped linearly onto [lo, hi]."""
        a, b = self.lo, self.hi
        if not hi > lo:
            hi = lo + 1.0
        return ColorRamp(tuple((lo + (v - a) / (b - a) * (hi - lo), rgb) for v, rgb in self.stops))


DENSITY_RAMP = ColorRamp(((0.0, (255, 255, 255)), (0.5, (0, 170, 0)), (1.0, (255, 230, 0)),
                          (2.0, (230, 0, 0)), (4.0, (128, 0, 128))))
TIME_RAMP = ColorRamp(((0.0, (40, 60, 200)), (0.5, (0, 190, 190)), (1.0, (240, 200, 0))))
FRACTION_RAMP = ColorRamp(((0.0, (255, 255, 255)), (0.25, (170, 210, 255)), (0.5, (60, 120, 230)),
                           (1.0, (10, 20, 110))))
PALETTE = ((230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
           (240, 50, 230), (128, 128, 0), (0, 128, 128), (170, 110, 40), (128, 0, 0), (0, 0, 128))


# -- image ----------------------------------------------------------------------

@dataclass
class MapImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row 0 at the top
    mpp: float = 1.0  # meters per pixel
    origin: tuple = (0.0, 0.0)  # world coordinate of the bottom-left corner

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise RenderError("pixel array does not match width x height")
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)

    @classmethod
    def blank(cls, width, height, color=WHITE, mpp=1.0, origin=(0.0, 0.0)) -> "MapImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:, :] = color
        return cls(width, height, px, mpp, origin)

    def pixel(self, x, y):
        return tuple(int(c) for c in self.pixels[y, x])

    def to_ppm(self) -> bytes:
        return b"P6\n%d %d\n255\n" % (self.width, self.height) + self.pixels.tobytes()

    def save(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.to_ppm())
        return p

    @classmethod
    def from_ppm(cls, data: bytes) -> "MapImage":
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
        if tokens[0] != b"P6" or tokens[3] != b"255":
            raise RenderError("only P6 with maxval 255 is supported")
        w, h = int(tokens[1]), int(tokens[2])
        body = data[pos + 1:pos + 1 + w * h * 3]
        if len(body) != w * h * 3:
            raise RenderError("truncated PPM")
        return cls(w, h, np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())

    def world_to_px(self, x, y):
        col = int(math.floor((x - self.origin[0]) / self.mpp))
        row = self.height - 1 - int(math.floor((y - self.origin[1]) / self.mpp))
        return col, row


# -- 5x7 font -----------------------------------------------------------------------

_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "=": ("00000", "00000", "11111", "00000", "11111", "00000", "00000"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    "s": ("00000", "00000", "01110", "10000", "01110", "00001", "11110"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    " ": ("00000",) * 7,
}
GLYPH_W, GLYPH_H, GLYPH_GAP = 5, 7, 1


def glyph(ch: str) -> np.ndarray:
    try:
        rows = _GLYPHS[ch]
    except KeyError:
        raise RenderError(f"no glyph for {ch!r}") from None
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)


def text_width(text: str, scale: int = 1) -> int:
    return (len(text) * (GLYPH_W + GLYPH_GAP) - GLYPH_GAP) * scale if text else 0


def draw_text(img: MapImage, x: int, y: int, text: str, color=BLACK, scale: int = 1) -> None:
    """Draw ``text`` with its top-left corner at pixel (x, y); clipped."""
    for i, ch in enumerate(text):
        g = glyph(ch)
        if scale > 1:
            g = np.kron(g, np.ones((scale, scale), dtype=bool))
        gx = x + i * (GLYPH_W + GLYPH_GAP) * scale
        ys, xs = np.nonzero(g)
        xs = xs + gx
        ys = ys + y
        ok = (xs >= 0) & (xs < img.width) & (ys >= 0) & (ys < img.height)
        img.pixels[ys[ok], xs[ok]] = color


def stamp_text(t: float) -> str:
    return f"T={t:06.1f} s"


def stamp(img: MapImage, t: float, scale: int = 1) -> None:
    """Simulation time at the top-left corner on a white box."""
    text = stamp_text(t)
    w = text_width(text, scale) + 2
    h = GLYPH_H * scale + 2
    img.pixels[0:min(h, img.height), 0:min(w, img.width)] = WHITE
    draw_text(img, 1, 1, text, BLACK, scale)


# -- maps ---------------------------------------------------------------------------

LEGEND_W = 48
SWATCH = 8


def _legend(ramp: ColorRamp, height: int) -> np.ndarray:
    """Legend strip: one swatch + label per stop, top = highest value."""
    need = 2 + len(ramp.stops) * (GLYPH_H + 4)
    h = max(height, need)
    strip = MapImage.blank(LEGEND_W, h)
    for i, ((v, rgb), label) in enumerate(zip(reversed(ramp.stops), reversed(ramp.labels()))):
        y = 2 + i * (GLYPH_H + 4)
        strip.pixels[y:y + GLYPH_H, 2:2 + SWATCH] = rgb
        strip.pixels[y, 2:2 + SWATCH] = BLACK
        strip.pixels[y + GLYPH_H - 1, 2:2 + SWATCH] = BLACK
        strip.pixels[y:y + GLYPH_H, 2] = BLACK
        strip.pixels[y:y + GLYPH_H, 1 + SWATCH] = BLACK
        draw_text(strip, 4 + SWATCH, y, label)
    return strip.pixels


def _grid_pixels(colors: np.ndarray, px: int) -> np.ndarray:
    """(ny, nx, 3) colours -> image rows, flipped so row 0 is the top."""
    return np.repeat(np.repeat(colors[::-1], px, axis=0), px, axis=1)


def _compose(body: np.ndarray, ramp: ColorRamp | None, legend: bool) -> np.ndarray:
    if not legend:
        return body
    strip = _legend(ramp, body.shape[0])
    h = max(body.shape[0], strip.shape[0])
    out = np.empty((h, body.shape[1] + strip.shape[1], 3), dtype=np.uint8)
    out[:] = WHITE
    out[:body.shape[0], :body.shape[1]] = body
    out[:strip.shape[0], body.shape[1]:] = strip
    return out


def render_density_map(densities, ramp: ColorRamp = DENSITY_RAMP, legend: bool = True, px: int = 4,
                       grid: GridSpec | None = None) -> MapImage:
    """Fill each grid cell (a px x px block) with ramp(density)."""
    d = np.asarray(densities, dtype=float)
    if d.ndim != 2 or d.size == 0:
        raise RenderError("densities must be a non-empty 2-D grid")
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise RenderError("densities must be non-negative numbers")
    body = _grid_pixels(ramp(d), px)
    pix = _compose(body, ramp, legend)
    mpp = grid.cell / px if grid else 1.0 / px
    origin = (grid.x0, grid.y0) if grid else (0.0, 0.0)
    return MapImage(pix.shape[1], pix.shape[0], pix, mpp, origin)


def render_utilization_map(fractions, ramp: ColorRamp = FRACTION_RAMP, legend: bool = True, px: int = 4,
                           grid: GridSpec | None = None) -> MapImage:
    return render_density_map(np.clip(fractions, 0, 1), ramp, legend, px, grid)


def render_time_map(trace: Trace, grid: GridSpec, horizon=None, ramp: ColorRamp = TIME_RAMP,
                    threshold: float | None = None, legend: bool = True, px: int = 4) -> MapImage:
    """Colour cells by the last time they held an agent.

    Never-occupied cells are neutral gray.  With ``threshold``, cells last
    occupied strictly after it are marked, earlier ones are white."""
    last = last_occupied(trace, grid, horizon)
    never = np.isnan(last)
    times = trace.window(horizon)
    lo = float(horizon[0]) if horizon else (float(times[0]) if len(times) else 0.0)
    hi = float(horizon[1]) if horizon else (float(times[-1]) if len(times) else 1.0)
    colors = np.empty(last.shape + (3,), dtype=np.uint8)
    if threshold is None:
        r = ramp.rescaled(lo, hi)
        colors[:] = r(np.where(never, lo, last))
    else:
        r = None
        colors[:] = WHITE
        colors[~never & (last > threshold + TIME_EPS)] = MARK
    colors[never] = NEUTRAL
    body = _grid_pixels(colors, px)
    pix = _compose(body, r, legend and r is not None)
    return MapImage(pix.shape[1], pix.shape[0], pix, grid.cell / px, (grid.x0, grid.y0))


# -- trails -------------------------------------------------------------------------

def bresenham(x0: int, y0: int, x1: int, y1: int):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


@dataclass(frozen=True)
class Viewport:
    x0: float
    y0: float
    mpp: float  # meters per pixel
    width: int
    height: int

    @classmethod
    def fit(cls, bounds, mpp: float) -> "Viewport":
        x0, y0, x1, y1 = bounds
        return cls(x0, y0, mpp, max(1, int(math.ceil((x1 - x0) / mpp))), max(1, int(math.ceil((y1 - y0) / mpp))))

    def blank(self, color=WHITE) -> MapImage:
        return MapImage.blank(self.width, self.height, color, self.mpp, (self.x0, self.y0))


def entity_colors(trace: Trace, agents, scheme=None) -> dict:
    """Colour per agent: ``scheme`` may map agent id, type or action to RGB;
    otherwise colours cycle through the palette in id order."""
    out = {}
    for i, ag in enumerate(sorted(agents)):
        c = None
        if scheme:
            if ag in scheme:
                c = scheme[ag]
            else:
                rows = np.nonzero(trace.agent == ag)[0]
                if len(rows):
                    c = scheme.get(trace.type[rows[0]]) or scheme.get(trace.action[rows[0]])
        out[ag] = tuple(c) if c is not None else PALETTE[i % len(PALETTE)]
    return out


def render_trails(trace: Trace, view: Viewport, agents=None, window=None, scheme=None) -> MapImage:
    """Polyline of each selected agent's samples within ``window``.

    ``agents``: iterable of ids, a PedFilter, or None for everybody."""
    from .analysis import _agents_matching
    from .scenario import PedFilter
    if agents is None:
        chosen = {int(a) for a in trace.agent_ids()}
    elif isinstance(agents, PedFilter):
        chosen = _agents_matching(trace, agents)
    else:
        chosen = {int(a) for a in agents} & {int(a) for a in trace.agent_ids()}
    img = view.blank()
    colors = entity_colors(trace, chosen, scheme)
    times = set(np.round(trace.window(window), 9))
    a, b = trace.segments()
    for ag in sorted(chosen):
        rows = np.nonzero((trace.agent == ag) & np.array([round(float(t), 9) in times for t in trace.time]))[0]
        rows = rows[np.argsort(trace.time[rows], kind="stable")]
        pts = [img.world_to_px(trace.x[k], trace.y[k]) for k in rows]
        if len(pts) == 1:
            pts = pts * 2
        for p, q in zip(pts, pts[1:]):
            for cx, cy in bresenham(p[0], p[1], q[0], q[1]):
                if 0 <= cx < img.width and 0 <= cy < img.height:
                    img.pixels[cy, cx] = colors[ag]
    return img


# -- frames -----------------------------------------------------------------------

def render_frame(trace: Trace, view: Viewport, t: float, stamp_time: bool = True, scheme=None,
                 dot: int = 1) -> MapImage:
    img = view.blank()
    m = trace.at(t)
    ids = [int(a) for a in trace.agent[m]]
    colors = entity_colors(trace, set(ids), scheme) if scheme else {}
    for k in np.nonzero(m)[0]:
        cx, cy = img.world_to_px(trace.x[k], trace.y[k])
        c = colors.get(int(trace.agent[k]), BLACK)
        y0, y1 = max(0, cy - dot + 1), min(img.height, cy + dot)
        x0, x1 = max(0, cx - dot + 1), min(img.width, cx + dot)
        if y0 < y1 and x0 < x1:
            img.pixels[y0:y1, x0:x1] = c
    if stamp_time:
        stamp(img, t)
    return img


def frame_times(every: float, duration: float) -> list:
    if not every > 0:
        raise RenderError("frame interval must be positive")
    n = int(math.floor(duration / every + 1e-9))
    return [k * every for k in range(1, n + 1)]


def emit_frames(trace: Trace, view: Viewport, every: float, out_dir, stamp_time: bool = True,
                duration: float | None = None, scheme=None) -> list:
    """Write frame_000001.ppm ... at t = k * every; returns the paths."""
    if duration is None:
        duration = float(trace.times[-1]) if len(trace.times) else 0.0
    out = Path(out_dir)
    paths = []
    for i, t in enumerate(frame_times(every, duration), start=1):
        paths.append(render_frame(trace, view, t, stamp_time, scheme).save(out / f"frame_{i:06d}.ppm"))
    return paths


# -- charts -------------------------------------------------------------------------

def chart_csv(x_name: str, x, series: dict) -> str:
    """Column per series, aligned on ``x``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(series)
    w.writerow([x_name] + names)
    for i, xv in enumerate(x):
        w.writerow([repr(float(xv))] + [repr(float(series[n][i])) for n in names])
    return buf.getvalue()


def density_chart(trace: Trace, areas: dict, interval=None) -> str:
    from .analysis import density_series
    times = trace.window(interval)
    series = {k: density_series(trace, a, interval)[1] for k, a in areas.items()}
    return chart_csv("time_s", times, series)
