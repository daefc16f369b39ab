"""CSV and gnuplot outputs for subordinator, inverse, path and error-table data."""

import logging
from collections.abc import Iterable

import numpy as np
import pandas as pd
from path import Path

from tclevy.harness import ErrorTable
from tclevy.solver import DiscretePath, time_changed_values
from tclevy.timechange import InverseTimeChange, SubordinatorPath

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
GNUPLOT_SUFFIX = ".gp.dat"


def _state_columns(prefix: str, dim: int) -> list[str]:
    if dim == 1:
        return [prefix]
    return [f"{prefix}_{j}" for j in range(dim)]


def query_times(horizon: float, resolution: int) -> np.ndarray:
    """Evenly spaced query grid with ``resolution`` points on ``[0, horizon]``."""
    return np.linspace(0.0, horizon, resolution)


def subordinator_frame(path: SubordinatorPath) -> pd.DataFrame:
    """Grid values ``(n, t_n, D_t_n)`` up to the first one past the horizon."""
    stop = path.n_index + 2
    return pd.DataFrame(
        {
            "n": np.arange(stop),
            "t_n": path.times[:stop],
            "D_t_n": path.values[:stop],
        }
    )


def inverse_frame(itc: InverseTimeChange, resolution: int) -> pd.DataFrame:
    """Samples ``(t, E_delta_t)`` of the inverse time change."""
    times = query_times(itc.horizon, resolution)
    return pd.DataFrame({"t": times, "E_delta_t": itc.evaluate(times)})


def original_path_frame(path: DiscretePath) -> pd.DataFrame:
    """Grid values ``(n, t_n, Y_n)`` on the natural clock."""
    columns = _state_columns("Y_n", path.values.shape[1])
    return pd.DataFrame(
        {
            "n": np.arange(path.values.shape[0]),
            "t_n": path.times,
            **dict(zip(columns, path.values.T, strict=True)),
        }
    )


def time_changed_frame(
    path: DiscretePath, itc: InverseTimeChange, resolution: int
) -> pd.DataFrame:
    """Samples ``(t, X_delta_t)`` of the time-changed approximation."""
    times = query_times(itc.horizon, resolution)
    values = time_changed_values(path, itc, times)
    columns = _state_columns("X_delta_t", values.shape[1])
    return pd.DataFrame({"t": times, **dict(zip(columns, values.T, strict=True))})


def error_table_frame(table: ErrorTable) -> pd.DataFrame:
    """Rows ``(delta, error, stderr)`` of an error table."""
    return pd.DataFrame(
        {
            "delta": [row.delta for row in table.rows],
            "error": [row.error for row in table.rows],
            "stderr": [row.stderr for row in table.rows],
        }
    )


def table_metadata(table: ErrorTable) -> list[str]:
    """Comment lines describing how a table was produced."""
    slope = "none" if table.slope is None else f"{table.slope:.17g}"
    lines = [
        f"kind={table.kind}",
        f"theta={table.theta:g}",
        f"alpha={table.alpha:g}",
        f"n_paths={table.n_paths}",
        f"ref_delta={table.ref_delta:.17g}",
        f"seed={table.seed}",
        f"slope={slope}",
    ]
    if table.intercept is not None:
        lines.append(f"intercept={table.intercept:.17g}")
    if table.slope_interval is not None:
        lo, hi = table.slope_interval
        lines.append(f"slope_interval={lo:.17g},{hi:.17g}")
    return lines


def render_csv(frame: pd.DataFrame, comments: Iterable[str] = ()) -> str:
    """CSV text with a header row, data rows and trailing ``# `` comment lines."""
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return text + "".join(f"# {line}\n" for line in comments)


def render_gnuplot(table: ErrorTable) -> str:
    """Two-column ``log2_delta log2_error`` text; rows without a positive error are skipped."""
    lines = ["# log2_delta log2_error"]
    lines += [
        f"{np.log2(row.delta):.17g} {np.log2(row.error):.17g}"
        for row in table.rows
        if row.error > 0
    ]
    return "\n".join(lines) + "\n"


def atomic_write(out: str | Path, text: str) -> Path:
    """Write ``text`` to a temporary sibling and rename it over ``out``."""
    out = Path(out)
    if out.parent:
        out.parent.makedirs_p()
    tmp = out.parent / f".{out.name}.tmp"
    try:
        tmp.write_bytes(text.encode("utf-8"))
        tmp.rename(out)
    except OSError:
        tmp.remove_p()
        raise
    logger.info("Wrote %s", out)
    return out


def write_frame(frame: pd.DataFrame, out: str | Path, comments: Iterable[str] = ()) -> Path:
    """Write one frame as CSV."""
    return atomic_write(out, render_csv(frame, comments))


def gnuplot_path(out: str | Path) -> Path:
    """Companion file name of an error table CSV."""
    return Path(f"{out}{GNUPLOT_SUFFIX}")


def write_error_table(table: ErrorTable, out: str | Path) -> tuple[Path, Path]:
    """Write an error table CSV and its gnuplot companion."""
    csv_path = write_frame(error_table_frame(table), out, table_metadata(table))
    return csv_path, atomic_write(gnuplot_path(out), render_gnuplot(table))
