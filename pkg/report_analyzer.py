import logging
from typing import Any, Dict, List

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRICS = ("rel_l2_err", "dg_to_local", "predict_ms")


class ReportAnalyzer:
    """
    Summarizes a benchmark report: one row per (method, test point) with
    columns method, theta_1.., dg_to_local, rel_l2_err, predict_ms
    """

    def __init__(self, reference_method: str = "local_pod"):
        self.reference_method = reference_method

    def analyze(self, report: pd.DataFrame) -> Dict[str, Any]:
        """
        Per-method statistics of every metric

        Parameters:
        -----------
        report : pd.DataFrame
            Benchmark rows

        Returns:
        --------
        Dict[str, Any]
            {"row_count", "methods", "failed_rows", "<method>": {"<metric>_mean"|..._median|..._max: float}}
        """
        if report is None or report.empty:
            return {"error": "No benchmark rows available for analysis"}

        results: Dict[str, Any] = {
            "row_count": len(report),
            "methods": sorted(report["method"].unique().tolist())
        }

        # Rows whose method raised carry NaN metrics
        failed = report[list(METRICS)].isna().any(axis=1)
        if failed.any():
            results["failed_rows"] = report.loc[failed, "method"].value_counts().to_dict()

        grouped = report.groupby("method")
        for method, group in grouped:
            stats = {}
            for col in METRICS:
                values = group[col].dropna()
                if values.empty:
                    continue
                stats[f"{col}_mean"] = float(values.mean())
                stats[f"{col}_median"] = float(values.median())
                stats[f"{col}_max"] = float(values.max())
            results[method] = stats
        return results

    def error_ratio(self, report: pd.DataFrame, method: str) -> float:
        """Mean rel_l2_err of `method` over that of the reference method; NaN when either is missing"""
        means = report.groupby("method")["rel_l2_err"].mean()
        if method not in means or self.reference_method not in means:
            return float("nan")
        reference = means[self.reference_method]
        if reference == 0:
            return float("inf") if means[method] > 0 else 1.0
        return float(means[method] / reference)

    def generate_insights(self, report: pd.DataFrame) -> List[str]:
        """
        Text lines describing the benchmark outcome

        Parameters:
        -----------
        report : pd.DataFrame
            Benchmark rows

        Returns:
        --------
        List[str]
            Insights, one sentence each
        """
        if report is None or report.empty:
            return ["No benchmark rows available for analysis"]

        insights = []
        methods = sorted(report["method"].unique().tolist())
        points = len(report) // max(len(methods), 1)
        insights.append(f"The benchmark covers {len(methods)} methods over {points} test points.")

        means = report.groupby("method")["rel_l2_err"].mean().dropna()
        for method, value in means.items():
            col = report.loc[report["method"] == method, "rel_l2_err"]
            insights.append(
                f"{method}: mean relative L2 error {value:.3e}, ranging from {col.min():.3e} to {col.max():.3e}."
            )

        if not means.empty:
            insights.append(f"Lowest mean error: {means.idxmin()}.")

        for method in methods:
            if method == self.reference_method:
                continue
            ratio = self.error_ratio(report, method)
            if np.isfinite(ratio):
                insights.append(f"{method} to {self.reference_method} error ratio is {ratio:.2f}.")

        if "gps" in means and "interp" in means:
            verdict = "at most" if means["gps"] <= means["interp"] else "above"
            insights.append(f"GPS mean error is {verdict} the subspace interpolation mean error.")

        timing = report.groupby("method")["predict_ms"].median().dropna()
        for method, value in timing.items():
            insights.append(f"Median {method} basis prediction takes {value:.3f} ms.")

        failed = report["rel_l2_err"].isna().sum()
        if failed:
            insights.append(f"{failed} rows failed and carry no error value.")
        return insights
