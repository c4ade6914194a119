import numpy as np
import pytest
import torch

from sam_matcher.attention import apply_masks
from sam_matcher.features import grid_queries, sample_descriptors
from sam_matcher.model import (
    SAM,
    SAMConfig,
    average_latent_map,
    cell_to_pixel,
    coarse_match,
    correspondence_map,
    match_pair,
    refine,
    render_map,
    split_correspondence_maps,
    window_center,
)
from sam_matcher.numeric import ShapeError
from sam_matcher.synthetic import gen_synthetic_pair
from sam_matcher.training import build_variant

from oracles import block_oracle


def toy_model(seed=0, **kw):
    torch.manual_seed(seed)
    return SAM(SAMConfig.toy(seed=seed, **kw))


def perturbed(model, scale=0.2, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    apply_masks(model)
    return model


@pytest.fixture(scope="module")
def pair():
    return gen_synthetic_pair(3, 32)


def test_config_profiles():
    toy = SAMConfig.toy()
    assert (toy.d_model, toy.heads, toy.n_latents, toy.n_self) == (32, 4, 8, 2)
    paper = SAMConfig.paper()
    assert (paper.d_model, paper.heads, paper.n_latents, paper.n_self, paper.feat_dim) == (256, 8, 128, 16, 128)
    assert SAMConfig.from_dict(toy.to_dict()) == toy
    with pytest.raises(ValueError):
        SAMConfig.for_profile("huge")


def test_model_construction_is_seeded():
    a, b = SAM(SAMConfig.toy(seed=4)), SAM(SAMConfig.toy(seed=4))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = SAM(SAMConfig.toy(seed=5))
    assert not torch.equal(a.latents, c.latents)


def test_input_ca_single_latent_matches_oracle(pair):
    model = perturbed(toy_model().double())
    ht = model.encode(pair.target).reshape(-1, 32)
    out = model.input_cross_attention(model.latents[:1], ht)
    expect = block_oracle(model.input_block, model.latents[:1].detach().numpy(), ht.detach().numpy())
    assert np.max(np.abs(out.detach().numpy() - expect)) <= 1e-10


def test_input_ca_duplicates_and_single_cell():
    model = perturbed(toy_model().double())
    ht = torch.randn(6, 32, dtype=torch.float64)
    d = torch.randn(1, 32, dtype=torch.float64)
    out = model.input_cross_attention(torch.cat([d, d]), ht)
    assert torch.equal(out[0], out[1])
    s = model.input_block.attn.coefficients(torch.randn(3, 32, dtype=torch.float64), ht[:1])
    assert torch.equal(s, torch.ones_like(s))
    with pytest.raises(ShapeError):
        model.input_cross_attention(d, torch.zeros(0, 32, dtype=torch.float64))


def test_self_attention_stack_composition():
    model = perturbed(toy_model().double())
    lat = torch.randn(5, 32, dtype=torch.float64)
    assert torch.equal(model.self_attention_stack(lat, 0), lat)
    assert torch.equal(model.self_attention_stack(lat, 1), model.self_blocks[0](lat, lat))


def test_latent_stage_query_permutation(pair):
    model = perturbed(toy_model().double())
    ht = model.encode(pair.target).reshape(-1, 32)
    desc = torch.randn(6, 32, dtype=torch.float64)
    perm = torch.randperm(6)
    _, q1, _ = model.latent_stage(desc, ht)
    _, q2, _ = model.latent_stage(desc[perm], ht)
    assert torch.allclose(q2, q1[perm], atol=1e-12)


def test_output_ca_examples():
    model = toy_model().double()
    ht = torch.randn(6, 32, dtype=torch.float64)
    with torch.no_grad():
        model.output_block.attn.w_v.weight.zero_()
        model.output_block.attn.w_o.weight.zero_()
    lat = torch.randn(4, 32, dtype=torch.float64)
    assert torch.allclose(model.output_cross_attention(ht, lat), model.output_block.norm1(ht), atol=1e-12)
    s = model.output_block.attn.coefficients(ht, lat[:1])
    assert torch.equal(s, torch.ones_like(s))


def test_output_ca_oracle():
    model = perturbed(toy_model().double(), seed=2)
    ht, lat = torch.randn(6, 32, dtype=torch.float64), torch.randn(4, 32, dtype=torch.float64)
    expect = block_oracle(model.output_block, ht.numpy(), lat.numpy())
    got = model.output_cross_attention(ht, lat).detach().numpy()
    assert np.max(np.abs(got - expect)) <= 1e-10


def test_correspondence_map_examples(rng):
    grid = torch.zeros(3, 4, 6)
    grid[1, 2, 0] = 2.0
    grid[0, 0, 1] = 5.0
    h = torch.tensor([1.0, 0, 0, 0, 0, 0])
    m = correspondence_map(h, grid)
    assert m[1, 2] == 2.0 and torch.count_nonzero(m) == 1
    assert coarse_match(m)[0] == cell_to_pixel(1, 2)
    g = rng.normal(size=(4, 4, 6))
    v = rng.normal(size=6)
    got = correspondence_map(torch.tensor(v), torch.tensor(g)).numpy()
    expect = np.array([[sum(g[r, c, k] * v[k] for k in range(6)) for c in range(4)] for r in range(4)])
    assert np.max(np.abs(got - expect)) <= 1e-12
    with pytest.raises(ShapeError):
        correspondence_map(torch.zeros(5), grid)


def test_split_maps_are_additive(rng):
    grid = torch.tensor(rng.normal(size=(4, 4, 8)))
    h = torch.tensor(rng.normal(size=8))
    vp, pos = split_correspondence_maps(h, grid)
    assert torch.max(torch.abs(vp + pos - correspondence_map(h, grid))).item() <= 1e-5
    low = grid.clone()
    low[..., 4:] = 0
    assert torch.count_nonzero(split_correspondence_maps(h, low)[1]) == 0
    up = grid.clone()
    up[..., :4] = 0
    assert torch.count_nonzero(split_correspondence_maps(h, up)[0]) == 0


def test_coarse_match_conventions():
    assert coarse_match(np.array([[0.3]])) == ((1.5, 1.5), 0.3)
    m = np.zeros((4, 5))
    m[2, 3] = 1.0
    assert coarse_match(m)[0] == (13.5, 9.5)
    assert coarse_match(np.ones((3, 3)))[0] == (1.5, 1.5)
    with pytest.raises(ShapeError):
        coarse_match(np.zeros((0, 3)))


def test_refine_lands_on_unique_match(rng):
    fs = rng.normal(size=(32, 32, 8))
    ft = rng.normal(size=(32, 32, 8)) * 0.01
    query = (5, 7)
    coarse = (13.5, 17.5)
    cx, cy = window_center(coarse, 32, 32)
    ft[cy - 3, cx + 2] = fs[7, 5] * 10
    assert refine(query, fs, ft, coarse) == (cx + 2, cy - 3)


def test_refine_constant_features_tie_break():
    fs = np.ones((32, 32, 4))
    assert refine((0, 0), fs, fs, (13.5, 17.5)) == (14 - 5, 18 - 5)
    # window clipped at the border starts at the image corner
    assert refine((0, 0), fs, fs, (1.5, 1.5)) == (0, 0)


def test_refine_window_scan_oracle(rng):
    for _ in range(50):
        h, w = 24, 28
        fs, ft = rng.normal(size=(h, w, 4)), rng.normal(size=(h, w, 4))
        q = (int(rng.integers(w)), int(rng.integers(h)))
        coarse = (4 * rng.integers(w // 4) + 1.5, 4 * rng.integers(h // 4) + 1.5)
        cx, cy = int(np.floor(coarse[0] + 0.5)), int(np.floor(coarse[1] + 0.5))
        best, arg = -np.inf, None
        for y in range(h):
            for x in range(w):
                if abs(x - cx) <= 5 and abs(y - cy) <= 5:
                    s = float(np.dot(ft[y, x], fs[q[1], q[0]]))
                    if s > best:
                        best, arg = s, (x, y)
        assert refine(q, fs, ft, coarse) == arg


def test_match_pair_single_query_is_manual_composition(pair):
    model = perturbed(toy_model(), seed=3)
    q = np.array([[8, 16]])
    [rec] = match_pair(model, pair.source, pair.target, q)
    with torch.no_grad():
        hs, ht = model.encode(pair.source), model.encode(pair.target)
        desc = sample_descriptors(hs, q)
        _, hq, ht_out = model.latent_stage(desc, ht.reshape(-1, 32))
        cmap = correspondence_map(hq[0], ht_out.reshape(ht.shape[0], ht.shape[1], -1))
        coarse, score = coarse_match(cmap)
        fine = refine(q[0], model.fine_features(pair.source), model.fine_features(pair.target), coarse)
    assert rec.query == (8, 16)
    assert rec.coarse == coarse and rec.refined == fine
    assert rec.score == pytest.approx(score, rel=1e-5)


def test_match_pair_default_grid_and_order():
    p = gen_synthetic_pair(1, 64)
    model = perturbed(toy_model(), seed=1)
    q = grid_queries(64, 64)
    recs = match_pair(model, p.source, p.target, q, coarse_only=True)
    assert len(recs) == 64
    assert [r.query for r in recs] == [tuple(v) for v in q.tolist()]
    for r in recs:
        assert r.coarse[0] % 4 == 1.5 and r.coarse[1] % 4 == 1.5
    shuffled = match_pair(model, p.source, p.target, q, coarse_only=True, shuffle_seed=9)
    assert [r.coarse for r in shuffled] == [r.coarse for r in recs]


def test_match_pair_query_permutation(pair):
    model = perturbed(toy_model(), seed=2)
    q = grid_queries(32, 32, 4)
    perm = np.random.default_rng(0).permutation(len(q))
    a = match_pair(model, pair.source, pair.target, q)
    b = match_pair(model, pair.source, pair.target, q[perm])
    assert [a[i].refined for i in perm] == [r.refined for r in b]
    assert [a[i].coarse for i in perm] == [r.coarse for r in b]


def test_batches_are_independent_without_coupling():
    cfg = build_variant("+InputCA_SA", "toy", n_self=0, seed=0)
    torch.manual_seed(0)
    model = perturbed(SAM(cfg), seed=4)
    p = gen_synthetic_pair(2, 64)
    q = np.random.default_rng(0).integers(0, 64, size=(40, 2))
    whole = match_pair(model, p.source, p.target, q, batch_size=40, coarse_only=True)
    parts = match_pair(model, p.source, p.target, q, batch_size=7, coarse_only=True)
    single = match_pair(model, p.source, p.target, q, batch_size=1, coarse_only=True)
    assert [r.coarse for r in whole] == [r.coarse for r in parts] == [r.coarse for r in single]


def test_match_pair_validation(pair):
    model = toy_model()
    with pytest.raises(ValueError):
        match_pair(model, pair.source, pair.target, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        match_pair(model, pair.source, pair.target, [(0, 0)], batch_size=0)
    with pytest.raises(ShapeError):
        match_pair(model, np.zeros((30, 32, 3)), pair.target, [(0, 0)])


def test_match_pair_determinism(pair):
    model = perturbed(toy_model(), seed=5)
    q = grid_queries(32, 32)
    a = match_pair(model, pair.source, pair.target, q)
    b = match_pair(model, pair.source, pair.target, q)
    assert a == b


def test_average_latent_map(pair):
    model = perturbed(toy_model(n_latents=1).double(), seed=6)
    m = average_latent_map(model, pair.source, pair.target)
    hs, ht = model.encode(pair.source), model.encode(pair.target)
    desc = sample_descriptors(hs, grid_queries(32, 32))
    m_out, _, ht_out = model.latent_stage(desc, ht.reshape(-1, 32))
    assert np.allclose(m, (ht_out @ m_out[0]).reshape(8, 8).detach().numpy(), atol=1e-12)

    model = perturbed(toy_model().double(), seed=6)
    m = average_latent_map(model, pair.source, pair.target)
    m_out, _, ht_out = model.latent_stage(sample_descriptors(model.encode(pair.source), grid_queries(32, 32)),
                                          model.encode(pair.target).reshape(-1, 32))
    by_mean_vector = (ht_out @ m_out.mean(0)).reshape(8, 8).detach().numpy()
    assert np.allclose(m, by_mean_vector, atol=1e-10)


def test_render_map():
    img = render_map(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert img.dtype == np.uint8 and img.min() == 0 and img.max() == 255
    assert render_map(np.ones((2, 2))).max() == 0


def zero_positional_inputs(model):
    with torch.no_grad():
        model.pe.fc2.weight.zero_()
        model.pe.fc2.bias.zero_()
        model.latents[:, model.config.feat_dim :] = 0


def test_positional_purity_through_pipeline(pair):
    model = perturbed(toy_model().double(), seed=7)
    zero_positional_inputs(model)
    hs, ht = model.encode(pair.source), model.encode(pair.target)
    assert torch.count_nonzero(hs[..., 16:]) == 0
    m_out, q_out, ht_out = model.latent_stage(sample_descriptors(hs, grid_queries(32, 32)), ht.reshape(-1, 32))
    for t in (m_out, q_out, ht_out):
        assert torch.max(torch.abs(t[:, 16:])).item() <= 1e-6
        assert torch.max(torch.abs(t[:, :16])).item() > 1e-3
