import numpy as np
import pytest

from fracplap.exponents import (
    AsymmetricExponent,
    ExponentOutOfRange,
    OrderTooLarge,
    build_exponent_field,
)
from fracplap.mesh import Domain

UNIT = Domain.from_extent([[0.0, 1.0]])
SQUARE = Domain.from_extent([[0.0, 1.0], [0.0, 1.0]])


def test_constant_exponent_is_accepted() -> None:
    field = build_exponent_field("2", None, 0.4, UNIT)
    assert field.p_minus == field.p_plus == 2.0
    assert field.q_minus == field.q_plus == 2.0
    assert field.sample_grid_resolution == 64
    assert field.s * field.p_plus < 1


def test_order_too_large() -> None:
    with pytest.raises(OrderTooLarge):
        build_exponent_field("2", None, 0.6, UNIT)


def test_asymmetric_exponent() -> None:
    with pytest.raises(AsymmetricExponent):
        build_exponent_field("2 + x", None, 0.3, UNIT)


def test_exponent_out_of_range() -> None:
    with pytest.raises(ExponentOutOfRange) as excinfo:
        build_exponent_field("1 + x*y", None, 0.3, UNIT)
    assert excinfo.value.name == "p"
    with pytest.raises(ExponentOutOfRange):
        build_exponent_field("2", "1", 0.3, UNIT)


def test_invalid_parameters() -> None:
    with pytest.raises(ValueError):
        build_exponent_field("2", None, 1.0, UNIT)
    with pytest.raises(ValueError):
        build_exponent_field("2", None, 0.3, UNIT, grid=4)


def test_variable_exponent_bounds() -> None:
    field = build_exponent_field("2 + 0.5*sin(pi*(x+y))", None, 0.3, UNIT)
    assert field.p_minus == pytest.approx(1.5, abs=1e-3)
    assert field.p_plus == pytest.approx(2.5, abs=1e-3)
    assert 1 < field.p_minus <= field.p_plus
    assert field.s * field.p_plus < 1


def test_q_defaults_to_diagonal_of_p() -> None:
    field = build_exponent_field("2 + x*y", None, 0.3, UNIT)
    x = np.array([[0.0], [0.5], [1.0]])
    np.testing.assert_allclose(field.q_values(x), [2.0, 2.25, 3.0])
    np.testing.assert_allclose(field.p_bar(x), [2.0, 2.25, 3.0])


def test_explicit_q() -> None:
    field = build_exponent_field("2", "3 - x", 0.3, UNIT)
    assert field.q_minus == pytest.approx(2.0)
    assert field.q_plus == pytest.approx(3.0)


def test_trace_regime_warning() -> None:
    field = build_exponent_field("2", None, 0.4, UNIT)
    assert len(field.warnings) == 1
    assert "s*p_minus" in field.warnings[0]
    field = build_exponent_field("2", None, 0.6, SQUARE)
    assert field.warnings == ()


def test_two_dimensional_field() -> None:
    field = build_exponent_field("2 + x1*y1 + x2*y2", None, 0.4, SQUARE)
    assert field.dimension == 2
    assert field.p_minus == pytest.approx(2.0)
    assert field.p_plus == pytest.approx(4.0)
    with pytest.raises(AsymmetricExponent):
        build_exponent_field("2 + x1", None, 0.3, SQUARE)
