import dataclasses
from pathlib import Path

MINUTES_PER_DAY = 1440
WEEKDAY = "weekday"
WEEKEND = "weekend"
DAY_TYPES = (WEEKDAY, WEEKEND)
# Matching days in the sliding window ending at the trial hour.
DEFAULT_WINDOW_DAYS = {WEEKDAY: 5, WEEKEND: 3}


@dataclasses.dataclass(frozen=True)
class PackageConsts:
    name: str
    module: str
    dir: Path
    config_path: Path
    schema_path: Path


_dir = Path(__file__).parent
consts = PackageConsts(
    name="Traffic LGP",
    module=__name__.rsplit(".", 1)[0],
    dir=_dir,
    config_path=_dir / "config.json",
    schema_path=_dir / "config.schema.json",
)
