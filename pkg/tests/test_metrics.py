import pytest

from proxyreplay.errors import DomainError
from proxyreplay.metrics import AccuracyMatrix, forgetting, metric_A, metric_AAA, metric_F


def matrix(cells):
    a = AccuracyMatrix()
    for (i, j), v in cells.items():
        a.set(i, j, v)
    return a


def test_average_accuracy():
    a = matrix({(1, 1): 0.9, (2, 1): 0.6, (2, 2): 0.8})
    assert metric_A(a, 2) == pytest.approx(0.7, abs=1e-15)


def test_anytime_accuracy():
    a = matrix({(1, 1): 0.5, (2, 1): 0.2, (2, 2): 0.4})
    assert metric_A(a, 1) == 0.5 and metric_A(a, 2) == pytest.approx(0.3)
    assert metric_AAA(a) == pytest.approx(0.4, abs=1e-15)


def test_forgetting():
    a = matrix({(1, 1): 0.8, (2, 1): 0.6, (2, 2): 0.9})
    assert forgetting(a, 2, 1) == pytest.approx(0.2, abs=1e-15)
    assert metric_F(a, 2) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(DomainError):
        metric_F(a, 1)


def test_forgetting_uses_best_earlier_row():
    a = matrix({(1, 1): 0.5, (2, 1): 0.9, (2, 2): 1.0, (3, 1): 0.4, (3, 2): 1.0, (3, 3): 0.7})
    assert forgetting(a, 3, 1) == pytest.approx(0.5)
    assert forgetting(a, 3, 2) == 0.0
    assert metric_F(a, 3) == pytest.approx(0.25)


def test_improving_column_gives_negative_forgetting():
    a = matrix({(1, 1): 0.2, (2, 1): 0.6, (2, 2): 0.5})
    assert metric_F(a, 2) == pytest.approx(-0.4)


def test_triangle_and_missing_cells():
    a = AccuracyMatrix()
    with pytest.raises(DomainError):
        a.set(1, 2, 0.5)
    with pytest.raises(DomainError):
        a[3, 1]
    with pytest.raises(DomainError):
        metric_AAA(a)


def test_csv_round_trip(tmp_path):
    a = matrix({(1, 1): 0.1 + 0.2, (2, 1): 1 / 3, (2, 2): 0.7})
    a.write_csv(tmp_path / "m.csv")
    b = AccuracyMatrix.read_csv(tmp_path / "m.csv")
    assert b.cells == a.cells
