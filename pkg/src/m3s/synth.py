"""Synthetic multimodal solar dataset: a clear-sky diurnal irradiance curve
modulated by moving elliptical clouds that occlude a rendered sun disk, with
pixel-exact 4-class masks and smoothly wandering meteorological columns.

Ground truth is controlled by construction: the irradiance dip at time t is
exactly the opacity-weighted fraction of the sun disk covered by clouds in
frame t, so a model that reads the images has strictly more information
than one that sees the series alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError
from .visual import BACKGROUND, GRAY_CLOUD, SUN, WHITE_CLOUD

STEPS_PER_DAY = 144          # 10-minute cadence
SUNRISE_STEP = 36            # 06:00
SUNSET_STEP = 108            # 18:00
G_MAX = 1000.0               # clear-sky peak, W/m^2
OCCLUSION_DEPTH = 0.8        # full cover at opacity 1 transmits 20%
DIRECT_FRACTION = 0.85       # horizontal direct share of GHI under clear sky

CSV_HEADER = "timestamp,ghi,dni,dhi,ws,wd,t,rh,p"

_SKY = np.array([70, 120, 200], dtype=np.float64)
_NIGHT = np.array([15, 20, 40], dtype=np.float64)
_SUN = np.array([255, 230, 90], dtype=np.float64)
_WHITE = np.array([235, 235, 235], dtype=np.float64)
_GRAY = np.array([120, 120, 125], dtype=np.float64)


@dataclass
class SynthSpec:
    """Generator knobs (the experiment config only cares about the output)."""

    days: int = 3
    size: int = 64
    seed: int = 0
    max_clouds: int = 3
    noise_std: float = 0.0

    def validate(self) -> "SynthSpec":
        if self.days < 1:
            raise ConfigError(f"days must be >= 1, got {self.days}")
        if self.size < 8:
            raise ConfigError(f"image size must be >= 8, got {self.size}")
        if self.max_clouds < 0:
            raise ConfigError(f"max_clouds must be >= 0, got {self.max_clouds}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        return self


def clear_sky_ghi(step_of_day: np.ndarray) -> np.ndarray:
    """G_max * max(0, sin(pi * (t - sunrise)/(sunset - sunrise)))."""
    t = np.asarray(step_of_day, dtype=np.float64)
    phase = (t - SUNRISE_STEP) / (SUNSET_STEP - SUNRISE_STEP)
    ghi = G_MAX * np.sin(np.pi * np.clip(phase, 0.0, 1.0))
    return np.where((t >= SUNRISE_STEP) & (t <= SUNSET_STEP),
                    np.maximum(ghi, 0.0), 0.0)


def sun_center(step_of_day: int, size: int) -> tuple[float, float, bool]:
    """Sun position: left-to-right transit, high at noon; up=False at night."""
    if not SUNRISE_STEP <= step_of_day <= SUNSET_STEP:
        return -1.0, -1.0, False
    phase = (step_of_day - SUNRISE_STEP) / (SUNSET_STEP - SUNRISE_STEP)
    x = (0.1 + 0.8 * phase) * (size - 1)
    # parabola: horizon at the ends, 0.2*size below the top at noon
    y = (0.85 - 0.65 * (1.0 - (2.0 * phase - 1.0) ** 2)) * (size - 1)
    return x, y, True


@dataclass
class _Cloud:
    x0: float
    y0: float
    vx: float
    vy: float
    ax: float          # semi-axes in pixels
    ay: float
    opacity: float

    def mask_at(self, step: int, size: int) -> np.ndarray:
        cx = self.x0 + self.vx * step
        cy = self.y0 + self.vy * step
        yy, xx = np.mgrid[0:size, 0:size]
        return ((xx - cx) / self.ax) ** 2 + ((yy - cy) / self.ay) ** 2 <= 1.0


def _day_clouds(rng: np.random.Generator, spec: SynthSpec) -> list[_Cloud]:
    n = int(rng.integers(0, spec.max_clouds + 1))
    size = spec.size
    clouds = []
    for _ in range(n):
        # a stream of clouds fast enough to cross the sun within a few
        # 10-minute steps; the entry strip spans the day's travel so
        # transits keep occurring from morning to evening
        speed = rng.uniform(1.2, 4.8) * size / STEPS_PER_DAY * 2.0
        x0 = rng.uniform(-speed * STEPS_PER_DAY, 0.6 * size)
        y0 = rng.uniform(0.1 * size, 0.9 * size)
        angle = rng.uniform(-0.4, 0.4)
        # two cloud populations: thin translucent (white class) and thick
        # dark-bottomed (gray class); the gap keeps the tone threshold crisp
        if rng.random() < 0.5:
            opacity = rng.uniform(0.25, 0.4)
        else:
            opacity = rng.uniform(0.65, 0.95)
        clouds.append(_Cloud(
            x0=x0, y0=y0,
            vx=speed * np.cos(angle), vy=speed * np.sin(angle),
            ax=rng.uniform(0.12, 0.3) * size,
            ay=rng.uniform(0.08, 0.2) * size,
            opacity=opacity))
    return clouds


def render_frame(step_of_day: int, clouds: list[_Cloud], size: int):
    """Returns (rgb uint8 HxWx3, mask uint8 HxW, occlusion float)."""
    sx, sy, up = sun_center(step_of_day, size)
    base = _SKY if up else _NIGHT
    img = np.tile(base, (size, size, 1))
    mask = np.full((size, size), BACKGROUND, dtype=np.uint8)

    sun_px = np.zeros((size, size), dtype=bool)
    if up:
        yy, xx = np.mgrid[0:size, 0:size]
        radius = max(2.0, 0.125 * size)
        sun_px = (xx - sx) ** 2 + (yy - sy) ** 2 <= radius ** 2
        img[sun_px] = _SUN
        mask[sun_px] = SUN

    # combined opacity: 1 - prod(1 - a_i) over covering clouds, in [0, 1]
    transmit = np.ones((size, size))
    covered = np.zeros((size, size), dtype=bool)
    for cloud in clouds:
        inside = cloud.mask_at(step_of_day, size)
        transmit[inside] *= 1.0 - cloud.opacity
        covered |= inside
    alpha = 1.0 - transmit

    if covered.any():
        color = np.where(alpha[..., None] >= 0.5, _GRAY[None, None, :],
                         _WHITE[None, None, :])
        img = np.where(covered[..., None],
                       img * (1.0 - alpha[..., None]) + color * alpha[..., None],
                       img)
        # any covering cloud claims the pixel; tone decides white vs gray
        mask[covered & (alpha < 0.5)] = WHITE_CLOUD
        mask[covered & (alpha >= 0.5)] = GRAY_CLOUD

    occlusion = 0.0
    if up and sun_px.any():
        occlusion = float(alpha[sun_px].mean())
    rgb = np.clip(img, 0, 255).astype(np.uint8)
    return rgb, mask, occlusion


def _walk(rng: np.random.Generator, n: int, start: float, sigma: float,
          lo: float, hi: float, wrap: float | None = None) -> np.ndarray:
    out = np.empty(n)
    x = start
    for i in range(n):
        x = x + rng.normal(scale=sigma)
        if wrap is not None:
            x %= wrap
        else:
            x = min(max(x, lo), hi)
        out[i] = x
    return out


def timestamp(day: int, step: int) -> str:
    """Filename-safe fixed-interval label: day D, 10-minute step S."""
    return f"d{day:03d}t{step:03d}"


def generate(root: str, spec: SynthSpec) -> dict:
    """Write series.csv, images/, masks/, manifest.txt under root.

    Returns {rows, images, days} counts.  Per-day RNG substreams keep day k
    identical no matter how many days are generated.
    """
    spec.validate()
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    lines = [CSV_HEADER]
    n_images = 0
    for day in range(spec.days):
        rng = np.random.default_rng([spec.seed, day])
        clouds = _day_clouds(rng, spec)
        ws = _walk(rng, STEPS_PER_DAY, start=4.0, sigma=0.4, lo=0.0, hi=15.0)
        wd = _walk(rng, STEPS_PER_DAY, start=float(rng.uniform(0, 360)),
                   sigma=4.0, lo=0.0, hi=360.0, wrap=360.0)
        rh = _walk(rng, STEPS_PER_DAY, start=55.0, sigma=0.8, lo=5.0, hi=100.0)
        pr = _walk(rng, STEPS_PER_DAY, start=1013.0, sigma=0.15,
                   lo=990.0, hi=1035.0)
        t_base = _walk(rng, STEPS_PER_DAY, start=15.0, sigma=0.1,
                       lo=-5.0, hi=35.0)
        diurnal = 6.0 * np.sin(np.pi * np.clip(
            (np.arange(STEPS_PER_DAY) - SUNRISE_STEP)
            / (SUNSET_STEP - SUNRISE_STEP), 0.0, 1.0))
        temp = t_base + diurnal
        noise = (rng.normal(scale=spec.noise_std, size=STEPS_PER_DAY)
                 if spec.noise_std > 0 else np.zeros(STEPS_PER_DAY))

        for step in range(STEPS_PER_DAY):
            rgb, mask, occl = render_frame(step, clouds, spec.size)
            stamp = timestamp(day, step)
            Image.fromarray(rgb, mode="RGB").save(
                os.path.join(img_dir, stamp + ".png"))
            Image.fromarray(mask, mode="L").save(
                os.path.join(mask_dir, stamp + ".png"))
            n_images += 1

            o = 1.0 - OCCLUSION_DEPTH * occl
            ghi_clear = float(clear_sky_ghi(np.array([step]))[0])
            ghi = max(ghi_clear * o + noise[step], 0.0)
            dni = DIRECT_FRACTION * o * ghi
            dhi = ghi - dni
            lines.append(
                f"{stamp},{ghi:.4f},{dni:.4f},{dhi:.4f},{ws[step]:.4f},"
                f"{wd[step]:.4f},{temp[step]:.4f},{rh[step]:.4f},{pr[step]:.4f}")

    with open(os.path.join(root, "series.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    counts = {"rows": len(lines) - 1, "images": n_images, "days": spec.days}
    with open(os.path.join(root, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"seed = {spec.seed}\ndays = {spec.days}\nsize = {spec.size}\n"
                 f"max_clouds = {spec.max_clouds}\nnoise_std = {spec.noise_std}\n"
                 f"rows = {counts['rows']}\nimages = {counts['images']}\n")
    return counts


__all__ = ["SynthSpec", "generate", "clear_sky_ghi", "sun_center",
           "render_frame", "timestamp", "STEPS_PER_DAY", "SUNRISE_STEP",
           "SUNSET_STEP", "G_MAX", "OCCLUSION_DEPTH", "CSV_HEADER"]
