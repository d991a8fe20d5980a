"""
Tests pour le tracé des sorties d'évaluation.
"""

import pytest

from geoadapt.core.default.paths import PR_CURVE_FILE, SEPARABILITY_HISTOGRAM
from geoadapt.core.errors import DataError
from geoadapt.core.evaluation import PRCurve, write_histogram, write_pr_curve
from geoadapt.tools.plotting import plot_histogram, render_directory


class TestPlotting:
    """Tests pour les figures PNG."""

    def test_render_directory(self, tmp_path):
        """Une figure par sortie présente."""
        write_pr_curve(tmp_path / PR_CURVE_FILE, PRCurve([0.1, 0.5], [1.0, 0.5], [0.25, 0.5], 0.3))
        write_histogram(tmp_path / SEPARABILITY_HISTOGRAM, [0.0, 1.0, 2.0], {"positive": [0.75, 0.25], "negative": [0.0, 1.0]})
        images = render_directory(tmp_path, tmp_path / "plots")
        assert [image.name for image in images] == ["pr_curve.png", "separability.png"]
        assert all(image.stat().st_size > 0 for image in images)

    def test_empty_directory(self, tmp_path):
        """Un répertoire sans sortie est une erreur de données."""
        with pytest.raises(DataError):
            render_directory(tmp_path, tmp_path / "plots")

    def test_missing_histogram(self, tmp_path):
        """Un histogramme absent est une erreur de données."""
        with pytest.raises(DataError):
            plot_histogram(tmp_path / "absent.csv", tmp_path / "out.png")
