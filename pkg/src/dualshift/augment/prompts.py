"""Text prompt templating for the semantic-to-image generation step."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from ..rendering import TIMES, WEATHERS

_BASE_TEMPLATE = ("An image sampled from various stereo video sequences taken by "
                  "dash cam in {place} in a {weather} {time}")
_OOD_TEMPLATE = "There is a {ood} accidentally staying on the road."


def city_list() -> list[str]:
    text = resources.files("dualshift").joinpath("data/cities.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class PromptSpec:
    place: str
    weather: str = "clear"
    time: str = "day"
    ood_class: str | None = None

    def __post_init__(self):
        if self.weather not in WEATHERS:
            raise ValueError(f"weather must be one of {WEATHERS}, got {self.weather!r}")
        if self.time not in TIMES:
            raise ValueError(f"time must be one of {TIMES}, got {self.time!r}")


def render_prompt(spec: PromptSpec) -> str:
    text = _BASE_TEMPLATE.format(place=spec.place, weather=spec.weather, time=spec.time)
    if spec.ood_class is not None:
        text += " " + _OOD_TEMPLATE.format(ood=spec.ood_class)
    return text


def random_prompt(rng, covariate: bool = True, ood_class: str | None = None,
                  cities: list[str] | None = None) -> PromptSpec:
    """Sample a prompt spec; with ``covariate`` the (weather, time) pair is
    forced away from clear/day so the augmentation always carries some shift."""
    cities = cities or city_list()
    place = str(rng.choice(cities))
    while True:
        weather = str(rng.choice(WEATHERS))
        time = str(rng.choice(TIMES))
        if not covariate or not (weather == "clear" and time == "day"):
            return PromptSpec(place=place, weather=weather, time=time, ood_class=ood_class)


def parse_prompt(prompt: str) -> tuple[str, str, str | None]:
    """Recover (weather, time, ood class) from a rendered prompt string.

    The synthetic backend consumes plain text, like a real generator would,
    so the covariate enums are parsed back out of the template.
    """
    m = re.search(rf"in a ({'|'.join(WEATHERS)}) ({'|'.join(TIMES)})", prompt)
    if not m:
        raise ValueError(f"prompt does not follow the template: {prompt!r}")
    ood = None
    m2 = re.search(r"There is a (.+?) accidentally staying on the road\.", prompt)
    if m2:
        ood = m2.group(1)
    return m.group(1), m.group(2), ood
