"""
Monitoring and health checks for solver runs.
"""
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

import structlog

logger = structlog.get_logger(__name__)

CRITICAL_ALERTS = frozenset({'RELAXATION_ABOVE_PHI', 'PICARD_DIVERGENCE', 'AUDIT_FAILED'})


@dataclass
class RunMetrics:
    """Counters for one command invocation."""
    command: str = 'run'
    start_time: float = field(default_factory=time.perf_counter)
    solver_calls: int = 0
    iterations: int = 0
    function_evaluations: int = 0
    warnings: List[str] = field(default_factory=list)
    values: Dict[str, float] = field(default_factory=dict)

    def add_solver(self, iterations: int = 0, function_evaluations: int = 0) -> None:
        self.solver_calls += 1
        self.iterations += int(iterations)
        self.function_evaluations += int(function_evaluations)

    def add_warning(self, message: str) -> None:
        self.warnings.append(message)

    def record_value(self, name: str, value: float) -> None:
        self.values[name] = float(value)

    def get_summary(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'duration_seconds': time.perf_counter() - self.start_time,
            'solver_calls': self.solver_calls,
            'iterations': self.iterations,
            'function_evaluations': self.function_evaluations,
            'warning_count': len(self.warnings),
            'warnings': list(self.warnings),
            'values': dict(self.values),
        }


class RunMonitor:
    """Applies thresholds to solver outcomes and tracks run health."""

    def __init__(self, command: str = 'run', thresholds: Optional[Dict[str, float]] = None):
        self.metrics = RunMetrics(command=command)
        self.alerts: List[Dict[str, Any]] = []
        self.thresholds = {
            'gradient_norm': 1e-6,
            'el_residual': 1e-2,
            'picard_contraction': 0.5,
            'relaxation_excess': 1e-8,
            'hjb_deviation': 1e-1,
        }
        if thresholds:
            self.thresholds.update(thresholds)

    def record_optimize(self, report: Any) -> None:
        """Record an nbody OptimizeReport."""
        self.metrics.add_solver(report.iterations, report.function_evaluations)
        self.metrics.record_value('final_action', report.final_action)
        if not report.converged:
            self._add_alert('OPTIMIZER_NOT_CONVERGED', f"optimizer stopped: {report.message}")
        if report.gradient_norm > self.thresholds['gradient_norm']:
            self._add_alert('HIGH_GRADIENT_NORM',
                            f"gradient norm {report.gradient_norm:.3e} exceeds "
                            f"{self.thresholds['gradient_norm']:.1e}")
        if report.el_residual > self.thresholds['el_residual']:
            self._add_alert('HIGH_EL_RESIDUAL',
                            f"Euler-Lagrange residual {report.el_residual:.3e} exceeds "
                            f"{self.thresholds['el_residual']:.1e}")

    def record_flow(self, flow: Any) -> None:
        """Record a vlasov CharacteristicFlow."""
        self.metrics.add_solver(flow.picard_iterations)
        self.metrics.record_value('max_contraction', flow.max_contraction)
        if flow.max_contraction >= self.thresholds['picard_contraction']:
            self._add_alert('PICARD_DIVERGENCE',
                            f"Picard contraction {flow.max_contraction:.3f} is not below "
                            f"{self.thresholds['picard_contraction']}")

    def record_relax(self, report: Any) -> None:
        """Record a relaxation RelaxReport."""
        self.metrics.add_solver(report.rounds, report.columns)
        self.metrics.record_value('relaxed_value', report.value)
        if report.value > report.phi + self.thresholds['relaxation_excess']:
            self._add_alert('RELAXATION_ABOVE_PHI',
                            f"relaxed value {report.value:.6g} exceeds Phi {report.phi:.6g}")
        if not report.converged:
            self._add_alert('RELAXATION_NOT_CONVERGED', "relaxation returned its best iterate")

    def record_audit(self, audit: Any) -> None:
        """Record a potentials GrowthAudit."""
        self.metrics.add_solver()
        if not audit.passed:
            self._add_alert('AUDIT_FAILED', "growth audit failed: "
                            + ("; ".join(audit.notes) if audit.notes else "no coercivity"))

    def record_hjb(self, report: Any) -> None:
        self.metrics.record_value('hjb_max_deviation', report.max_deviation)
        if not report.evaluated_slices:
            self._add_alert('HJB_NOT_EVALUATED', "no cells stay occupied over three consecutive slices")
        if report.max_deviation > self.thresholds['hjb_deviation']:
            self._add_alert('HIGH_HJB_DEVIATION',
                            f"HJB deviation {report.max_deviation:.3e} exceeds "
                            f"{self.thresholds['hjb_deviation']:.1e}")

    def record_warning(self, message: str) -> None:
        self.metrics.add_warning(message)
        logger.warning("run_warning", message=message)

    def _add_alert(self, alert_type: str, message: str) -> None:
        alert = {
            'type': alert_type,
            'message': message,
            'timestamp': datetime.now().isoformat(),
        }
        self.alerts.append(alert)
        logger.warning("alert", alert_type=alert_type, message=message)

    def get_health_status(self) -> str:
        if not self.alerts:
            return 'HEALTHY'
        if any(a['type'] in CRITICAL_ALERTS for a in self.alerts):
            return 'CRITICAL'
        return 'WARNING'

    def get_performance_report(self) -> Dict[str, Any]:
        """Health status, metrics, alerts and recommendations for report.json."""
        return {
            'health_status': self.get_health_status(),
            'metrics': self.metrics.get_summary(),
            'alerts': list(self.alerts),
            'recommendations': self._get_recommendations(),
        }

    def _get_recommendations(self) -> List[str]:
        types = {a['type'] for a in self.alerts}
        recommendations = []
        if types & {'OPTIMIZER_NOT_CONVERGED', 'HIGH_GRADIENT_NORM'}:
            recommendations.append("raise optimizer.max_iter or loosen optimizer.gtol")
        if 'HIGH_EL_RESIDUAL' in types:
            recommendations.append("refine grid.steps; the residual is first order in dt")
        if 'PICARD_DIVERGENCE' in types:
            recommendations.append("shorten grid.T or refine grid.steps to shrink Picard windows")
        if 'RELAXATION_NOT_CONVERGED' in types:
            recommendations.append("raise relaxation.max_rounds or relaxation.points")
        if 'HIGH_HJB_DEVIATION' in types:
            recommendations.append("refine hjb.cells together with grid.steps")
        if 'HJB_NOT_EVALUATED' in types:
            recommendations.append("use fewer hjb.cells or more hjb.particles so the support is connected")
        return recommendations

    def reset(self) -> None:
        self.metrics = RunMetrics(command=self.metrics.command)
        self.alerts.clear()
