#!/usr/bin/env python3
"""
Artifact Manager for mean-field-action runs

Writes run artifacts atomically (temporary file in the target directory, then
os.replace) and reads trajectory and field CSVs back into library types.
"""

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, TextIO

import numpy as np
import structlog

from .core import PathEnsemble, TimeGrid, ValidationError
from .ot_hjb import EulerianField1D, SpaceGrid
from .vlasov import CharacteristicFlow

logger = structlog.get_logger(__name__)

REPORT_FILE = 'report.json'
TRAJECTORIES_FILE = 'trajectories.csv'
FIELD_FILE = 'field.csv'

# Keys that differ between otherwise identical runs.
VOLATILE_KEYS = frozenset({'wall_time_seconds', 'duration_seconds', 'timestamp'})


def _number(value: float) -> str:
    # repr round-trips binary64 exactly
    return repr(float(value))


def _strip_volatile(data: Any) -> Any:
    if isinstance(data, dict):
        return {k: _strip_volatile(v) for k, v in data.items() if k not in VOLATILE_KEYS}
    if isinstance(data, list):
        return [_strip_volatile(v) for v in data]
    return data


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


@dataclass
class RunRecord:
    """Files written by one command invocation."""
    command: str
    directory: Path
    files: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'directory': str(self.directory),
            'files': list(self.files),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunRecord':
        return cls(command=data['command'], directory=Path(data['directory']),
                   files=list(data.get('files', [])))


class ArtifactManager:
    """Manages report and CSV artifacts of one output directory."""

    def __init__(self, directory: str, command: str = 'run', include_timing: bool = False):
        """
        Initialize the artifact manager.

        Args:
            directory: Output directory, created on first write
            command: Command name recorded with the written files
            include_timing: Keep wall-clock fields in report.json
        """
        self.directory = Path(directory)
        self.include_timing = include_timing
        self.record = RunRecord(command=command, directory=self.directory)

    def _atomic_write(self, name: str, write: Callable[[TextIO], None]) -> bool:
        target = self.directory / name
        tmp_name = None
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile('w', encoding='utf-8', newline='', dir=self.directory,
                                             prefix=f".{name}.", suffix='.tmp', delete=False) as f:
                tmp_name = f.name
                write(f)
            os.replace(tmp_name, target)
            if name not in self.record.files:
                self.record.files.append(name)
            logger.info("artifact_written", path=str(target))
            return True
        except (OSError, TypeError, ValueError) as e:
            logger.error("artifact_write_failed", path=str(target), error=str(e))
            if tmp_name is not None and os.path.exists(tmp_name):
                os.unlink(tmp_name)
            return False

    def save_report(self, report: Dict[str, Any]) -> bool:
        """
        Write report.json with sorted keys.

        Returns:
            True if successful, False otherwise
        """
        data = report if self.include_timing else _strip_volatile(report)
        data = dict(data, artifacts=sorted(set(self.record.files) | {REPORT_FILE}))

        def write(f: TextIO) -> None:
            json.dump(data, f, indent=2, sort_keys=True, default=_jsonable)
            f.write('\n')
        return self._atomic_write(REPORT_FILE, write)

    def save_trajectories(self, ensemble: PathEnsemble) -> bool:
        """
        Write trajectories.csv, one row per path and node.

        The velocity of node i is that of interval i; the final node repeats
        the last interval velocity.
        """
        d = ensemble.dim
        velocities = ensemble.velocities
        velocities = np.concatenate([velocities, velocities[:, -1:, :]], axis=1)
        times = ensemble.grid.times

        def write(f: TextIO) -> None:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['t', 'path_id', 'weight']
                            + [f'x{j}' for j in range(d)] + [f'v{j}' for j in range(d)])
            for n in range(ensemble.size):
                for i, t in enumerate(times):
                    writer.writerow([_number(t), n, _number(ensemble.weights[n])]
                                    + [_number(x) for x in ensemble.nodes[n, i]]
                                    + [_number(v) for v in velocities[n, i]])
        return self._atomic_write(TRAJECTORIES_FILE, write)

    def save_flow(self, flow: CharacteristicFlow) -> bool:
        """Write characteristic atom trajectories in the trajectories.csv layout."""
        d = flow.initial.dim

        def write(f: TextIO) -> None:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['t', 'path_id', 'weight']
                            + [f'x{j}' for j in range(d)] + [f'v{j}' for j in range(d)])
            for k in range(flow.initial.size):
                for i, t in enumerate(flow.grid.times):
                    writer.writerow([_number(t), k, _number(flow.weights[k])]
                                    + [_number(x) for x in flow.positions[i, k]]
                                    + [_number(v) for v in flow.velocities[i, k]])
        return self._atomic_write(TRAJECTORIES_FILE, write)

    def save_field(self, fld: EulerianField1D) -> bool:
        """Write field.csv with one row per slice and cell."""
        centers = fld.space.centers

        def write(f: TextIO) -> None:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['t', 'x', 'rho', 'V'])
            for i, t in enumerate(fld.times):
                for j, x in enumerate(centers):
                    writer.writerow([_number(t), _number(x), _number(fld.rho[i, j]),
                                     _number(fld.velocity[i, j])])
        return self._atomic_write(FIELD_FILE, write)


def load_report(path: str) -> Optional[Dict[str, Any]]:
    """Read a report.json; None if it is missing or unreadable."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error("report_load_failed", path=str(path), error=str(e))
        return None


def _read_rows(path: str, required: List[str]) -> List[Dict[str, str]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        missing = [name for name in required if name not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path} lacks columns {missing}")
        return list(reader)


def load_trajectories(path: str) -> PathEnsemble:
    """Rebuild a PathEnsemble from trajectories.csv."""
    rows = _read_rows(path, ['t', 'path_id', 'weight', 'x0'])
    d = sum(1 for name in rows[0] if name.startswith('x')) if rows else 0
    if not rows or d == 0:
        raise ValidationError(f"{path} holds no trajectory rows")
    paths: Dict[int, List[Dict[str, str]]] = {}
    for row in rows:
        paths.setdefault(int(row['path_id']), []).append(row)
    ids = sorted(paths)
    lengths = {len(paths[n]) for n in ids}
    if len(lengths) != 1 or lengths == {1}:
        raise ValidationError("every path needs the same number (>= 2) of nodes")
    nodes = np.array([[[float(r[f'x{j}']) for j in range(d)]
                       for r in sorted(paths[n], key=lambda r: float(r['t']))] for n in ids])
    weights = np.array([float(paths[n][0]['weight']) for n in ids])
    T = max(float(r['t']) for r in rows)
    return PathEnsemble(TimeGrid(T, nodes.shape[1] - 1), nodes, weights)


def load_field(path: str, T: Optional[float] = None) -> EulerianField1D:
    """
    Rebuild an EulerianField1D from field.csv.

    Slice times are left endpoints, so T is inferred from their spacing; it
    must be given when the file holds a single slice.
    """
    rows = _read_rows(path, ['t', 'x', 'rho', 'V'])
    times = sorted({float(r['t']) for r in rows})
    centers = sorted({float(r['x']) for r in rows})
    if len(times) == 1 and T is None:
        raise ValidationError("horizon T is required for a single-slice field")
    if len(centers) < 2:
        raise ValidationError("field needs at least two cells")
    if T is None:
        T = times[-1] + (times[-1] - times[0]) / (len(times) - 1)
    width = (centers[-1] - centers[0]) / (len(centers) - 1)
    space = SpaceGrid(centers[0] - width / 2, centers[-1] + width / 2, len(centers))
    t_index = {t: i for i, t in enumerate(times)}
    x_index = {x: j for j, x in enumerate(centers)}
    rho = np.zeros((len(times), len(centers)))
    velocity = np.zeros_like(rho)
    for r in rows:
        i, j = t_index[float(r['t'])], x_index[float(r['x'])]
        rho[i, j] = float(r['rho'])
        velocity[i, j] = float(r['V'])
    return EulerianField1D(TimeGrid(T, len(times)), space, rho, velocity)
