from .grid import (
    EnvUsageError,
    FlagsEnv,
    FlagsState,
    GridSpec,
    InvalidStart,
    KeyLockEnv,
    KeyLockState,
    board_path,
    load_board,
    make_grid_env,
    parse_board,
)
from .parking import ParkingEnv, ParkingSpec, ParkingState, spot_layout
