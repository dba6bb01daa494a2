import csv

import numpy as np
import pytest
import torch

from conftest import MICRO
from tnrf.dataset import Box, CorrespondenceOracle
from tnrf.evaluation import PAIR_FIELDS, PairScore, evaluate_pairs, parse_pairs, summarize, write_scores
from tnrf.exceptions import ValidationError
from tnrf.fields import FieldModel, LatentPair


def test_parse_pairs():
    assert parse_pairs("all", 3) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    assert parse_pairs("0-2,1-0", 3) == [(0, 2), (1, 0)]
    for bad in ("0-3", "a-b", "1"):
        with pytest.raises(ValidationError):
            parse_pairs(bad, 3)


def test_write_scores_and_summary(tmp_path):
    scores = [PairScore(0, 1, 10, 0.1, 0.05, 0.3, 0.2, 1.5), PairScore(1, 0, 10, 0.3, 0.1, 0.5, 0.4, 1.5)]
    write_scores(tmp_path / "s.csv", scores)
    with open(tmp_path / "s.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == PAIR_FIELDS and rows[1][:3] == ["0", "1", "10"]
    s = summarize(scores)
    assert s["mean_error"] == pytest.approx(0.2) and s["baseline_mean_error"] == pytest.approx(0.4)


class CubeDensity(FieldModel):
    """Identity-warp model whose density is an analytic cube of half-width 0.5."""

    def evaluate(self, x, d, shape_film, app_film=None, with_derivatives=False):
        out = super().evaluate(x, d, shape_film, app_film, with_derivatives)
        out.sigma = 50.0 * (x.abs().max(-1).values < 0.5).to(x.dtype)
        return out


def test_identical_instances_score_near_zero():
    # two equal cubes, identity warp: the learned map and the baseline both return the query
    model = CubeDensity(MICRO).double().reset_parameters(torch.Generator().manual_seed(0))
    cube = Box(np.zeros(3), np.full(3, 0.5))
    oracle = CorrespondenceOracle([[cube], [cube]])
    lat = LatentPair(np.zeros(4), np.zeros(4))
    scores = evaluate_pairs(model, lambda i: lat, oracle, [(0, 1)], n_queries=50, grid_resolution=32, level=10.0)
    # error is bounded by the vertex spacing of the extracted surface
    assert scores[0].mean_error < 2 * (2 / 31) / oracle.bbox_diagonal(1)
    assert scores[0].mean_error == pytest.approx(scores[0].baseline_mean_error)
