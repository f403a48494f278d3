""" Tests of the folded penalties on the multipliers and the coefficients. """

import numpy as np
import pytest

from numpy.testing import assert_allclose

from context import rpel
from rpel.penalties import Penalties, PenaltyConfig, l1, mcp, penalty, penalty_d1, penalty_d2, scad


CONFIGS = [scad(0.5), scad(0.2, a=4.), l1(0.3), mcp(0.5), mcp(0.4, a=2.)]


def test_defaults():
    assert PenaltyConfig().a == 3.7
    assert PenaltyConfig('mcp').a == 3.
    assert PenaltyConfig('mcp').family == 'MCP'
    with pytest.raises(ValueError):
        PenaltyConfig('lasso')
    with pytest.raises(ValueError):
        PenaltyConfig('SCAD', eta=-1.)
    with pytest.raises(ValueError):
        PenaltyConfig('SCAD', a=2.)


def test_scad_values():
    cfg = scad(1.)
    theta = np.array([0., 0.5, 1., 2., 3.7, 10.])
    expected = [0., 0.5, 1., (2*3.7*2 - 4 - 1)/(2*2.7), 4.7/2, 4.7/2]
    assert_allclose(penalty(theta, cfg), expected)
    assert_allclose(penalty_d1(theta, cfg), [1., 1., 1., 1.7/2.7, 0., 0.])


@pytest.mark.parametrize('cfg', CONFIGS, ids=lambda c: f"{c.family}{c.eta}")
def test_continuity_and_monotonicity(cfg):
    theta = np.linspace(0, 5, 50001)
    P = penalty(theta, cfg)
    assert np.all(np.diff(P) >= -1e-15)
    assert np.max(np.abs(np.diff(P))) < 1e-3 # No jumps
    d1 = penalty_d1(theta, cfg)
    assert np.all(d1 >= 0) and np.all(np.diff(d1) <= 1e-15) # Concave
    assert np.max(np.abs(np.diff(d1))) < 1e-3 # Derivative continuous, also at the kinks


@pytest.mark.parametrize('cfg', CONFIGS, ids=lambda c: f"{c.family}{c.eta}")
def test_derivatives(cfg):
    theta = np.linspace(0.013, 4, 300)
    kinks = [cfg.eta, cfg.a*cfg.eta] if cfg.family != 'L1' else []
    theta = theta[np.all([np.abs(theta - k) > 1e-3 for k in kinks], axis=0)] if kinks else theta
    h = 1e-7
    assert_allclose(penalty_d1(theta, cfg), (penalty(theta + h, cfg) - penalty(theta - h, cfg))/(2*h), atol=1e-6)
    assert_allclose(penalty_d2(theta, cfg), (penalty_d1(theta + h, cfg) - penalty_d1(theta - h, cfg))/(2*h), atol=1e-6)


def test_right_limits():
    cfg = scad(1.)
    assert penalty_d1(0., cfg) == 1.
    assert penalty_d2(1., cfg) == pytest.approx(-1/2.7) # Right limit at eta
    assert penalty_d2(3.7, cfg) == 0.
    assert penalty_d2(0.5, scad(0.)) == 0.


def test_zero_level_is_off():
    theta = np.array([0., 1., 5.])
    for family in ('SCAD', 'L1', 'MCP'):
        cfg = PenaltyConfig(family, 0.)
        assert_allclose(penalty(theta, cfg), 0.)
        assert_allclose(penalty_d1(theta, cfg), 0.)


def test_negative_theta():
    with pytest.raises(ValueError):
        penalty(np.array([-0.1]), scad(1.))


def test_penalties_pair():
    pen = Penalties.scad(0.1, 0.2)
    assert pen.v == 0.1 and pen.omega == 0.2
    moved = pen.with_levels(omega=0.5)
    assert moved.v == 0.1 and moved.omega == 0.5 and moved.beta.family == 'SCAD'
    mixed = Penalties(l1(0.), mcp(0.))
    assert mixed.with_levels(0.3, 0.4).lam.family == 'L1'
    assert mixed.with_levels(0.3, 0.4).beta.a == 3.
