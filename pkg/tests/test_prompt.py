import numpy as np
import pytest

from ctm import tensor as T
from ctm.data import CLASSES, format_input
from ctm.encoder import Backbone, EncoderConfig
from ctm.errors import ConfigError, ContractError
from ctm.mlm import MLMConfig, evaluate_mlm, mask_batch, mlm_loss, pretrain_mlm
from ctm.optim import checksum
from ctm.prompt import PromptMatrix, TuneConfig, init_prompt, prompt_inputs, prompt_mlm_loss, stack_prompts, \
    tune_prompt
from ctm.rng import Rng
from ctm.tokenize import build_vocab


@pytest.fixture(scope="module")
def small(corpus):
    """Brand examples, a vocabulary over the corpus titles and a small pair of backbones."""
    train, test, _ = corpus
    vocab = build_vocab([ex.title for ex in train + test], 512,
                        reserved_words="is a brand product feature".split())
    cfg = EncoderConfig(d=16, heads=2, ff_dim=32, layers=1, vocab_size=len(vocab))
    backbones = {k: Backbone(cfg, k, Rng(3)) for k in ("wordpiece", "char")}
    brands = [ex for ex in train if ex.gold == "brand"][:48]
    return vocab, backbones, brands


class TestInitPrompt:
    @pytest.mark.parametrize("kind", ["wordpiece", "char"])
    def test_lengths(self, small, kind):
        vocab, bbs, _ = small
        assert init_prompt("labels", "brand", bbs[kind], vocab).H.shape == (3, 16)
        assert init_prompt("dictionary", "brand", bbs[kind], vocab).H.shape == (14, 16)

    def test_label_rows_are_phrase_embeddings(self, small):
        vocab, bbs, _ = small
        H = init_prompt("labels", "brand", bbs["wordpiece"], vocab).H.data
        ids = [vocab.id(w) for w in ("is", "a", "brand")]
        np.testing.assert_array_equal(H, bbs["wordpiece"].params["tok_emb"].data[ids])

    @pytest.mark.parametrize("kind", ["wordpiece", "char"])
    def test_deterministic(self, small, kind):
        vocab, bbs, _ = small
        a = init_prompt("dictionary", "feature", bbs[kind], vocab).H.data
        b = init_prompt("dictionary", "feature", bbs[kind], vocab).H.data
        np.testing.assert_array_equal(a, b)

    def test_unknown_class(self, small):
        vocab, bbs, _ = small
        with pytest.raises(ContractError):
            init_prompt("labels", "colour", bbs["wordpiece"], vocab)


@pytest.fixture(scope="module")
def inputs(small, corpus):
    vocab = small[0]
    return [format_input(ex.title, ex.entity, 3, kind="wordpiece", vocab=vocab, max_seq=64,
                         hypothesis_class=ex.gold) for ex in corpus[0][:200]]


class TestMaskBatch:
    def test_prompt_slot_and_specials_never_masked(self, small, inputs):
        vocab = small[0]
        rng = Rng(0)
        for i in range(1000):
            batch = [inputs[j] for j in rng.integers(0, len(inputs), 8)]
            mb = mask_batch(batch, 0.15, (0.8, 0.1, 0.1), rng, vocab, "wordpiece")
            for b, t in zip(mb.rows, mb.positions):
                f = batch[b]
                assert 1 <= t <= f.n or f.n + 2 <= t < f.n + 2 + f.m
                assert t < f.slot_start

    def test_expected_masked_count(self, small, inputs):
        vocab = small[0]
        rng = Rng(1)
        masked = content = 0
        for _ in range(50):
            mb = mask_batch(inputs, 0.15, (0.8, 0.1, 0.1), rng, vocab, "wordpiece")
            masked += len(mb)
            content += sum(f.n + f.m for f in inputs)
        # binomial: 5 standard deviations
        sd = np.sqrt(content * 0.15 * 0.85)
        assert abs(masked - 0.15 * content) < 5 * sd

    def test_split_proportions(self, small, inputs):
        vocab = small[0]
        rng = Rng(2)
        n_mask = n_total = 0
        for _ in range(40):
            mb = mask_batch(inputs, 0.15, (0.8, 0.1, 0.1), rng, vocab, "wordpiece")
            for b, t in zip(mb.rows, mb.positions):
                n_mask += mb.inputs[b].tokens[t] == "[MASK]"
            n_total += len(mb)
        assert abs(n_mask / n_total - 0.8) < 0.03

    def test_zero_rate_is_empty(self, small, inputs):
        vocab, bbs, _ = small
        mb = mask_batch(inputs[:10], 0.0, (0.8, 0.1, 0.1), Rng(0), vocab, "wordpiece")
        assert len(mb) == 0
        assert mlm_loss(bbs["wordpiece"], mb, len(vocab)) is None
        H = init_prompt("labels", "brand", bbs["wordpiece"], vocab).H
        loss = evaluate_mlm(bbs["wordpiece"], inputs[:10], vocab, MLMConfig(mask_rate=0.0), Rng(0),
                            H, {"brand": 0, "product": 0, "feature": 0})
        assert loss == 0.0


class TestTunePrompt:
    @pytest.mark.parametrize("kind", ["wordpiece", "char"])
    def test_frozen_backbone_and_moving_prompt(self, small, kind):
        vocab, bbs, brands = small
        bb = bbs[kind]
        before = checksum(bb.params)
        init = init_prompt("labels", "brand", bb, vocab)
        tuned, hist = tune_prompt(bb, brands, init, vocab, TuneConfig(epochs=2, batch_size=16), Rng(5))
        assert checksum(bb.params) == before
        assert np.linalg.norm(tuned.H.data - init.H.data) > 0
        assert len(hist["epoch_loss"]) == 2
        assert all(t.grad is None for t in bb.params.values())

    def test_zero_epochs_is_noop(self, small):
        vocab, bbs, brands = small
        init = init_prompt("labels", "brand", bbs["wordpiece"], vocab)
        tuned, _ = tune_prompt(bbs["wordpiece"], brands, init, vocab, TuneConfig(epochs=0), Rng(5))
        np.testing.assert_array_equal(tuned.H.data, init.H.data)

    def test_deterministic(self, small):
        vocab, bbs, brands = small
        init = init_prompt("dictionary", "brand", bbs["char"], vocab)
        a, _ = tune_prompt(bbs["char"], brands[:16], init, vocab, TuneConfig(epochs=1, batch_size=8), Rng(9))
        b, _ = tune_prompt(bbs["char"], brands[:16], init, vocab, TuneConfig(epochs=1, batch_size=8), Rng(9))
        np.testing.assert_array_equal(a.H.data, b.H.data)

    def test_other_classes_untouched(self, small):
        vocab, bbs, brands = small
        bb = bbs["wordpiece"]
        prompts = {c: init_prompt("labels", c, bb, vocab) for c in CLASSES}
        snapshot = {c: p.H.data.copy() for c, p in prompts.items()}
        tune_prompt(bb, brands[:16], prompts["brand"], vocab, TuneConfig(epochs=1, batch_size=8), Rng(1))
        for c in CLASSES:
            np.testing.assert_array_equal(prompts[c].H.data, snapshot[c])

    def test_empty_examples(self, small):
        vocab, bbs, _ = small
        init = init_prompt("labels", "brand", bbs["wordpiece"], vocab)
        with pytest.raises(ConfigError):
            tune_prompt(bbs["wordpiece"], [], init, vocab, TuneConfig(), Rng(0))

    def test_kind_mismatch(self, small):
        vocab, bbs, brands = small
        init = init_prompt("labels", "brand", bbs["char"], vocab)
        with pytest.raises(ContractError):
            tune_prompt(bbs["wordpiece"], brands, init, vocab, TuneConfig(epochs=1), Rng(0))

    def test_gradient_isolation(self, small):
        # the loss depends on backbone weights, yet no gradient is stored on them
        vocab, bbs, brands = small
        bb = bbs["wordpiece"]
        bb.set_trainable(False)
        H = init_prompt("labels", "brand", bb, vocab).copy(requires_grad=True)
        inputs = prompt_inputs(brands[:8], H, bb, vocab)
        mb = mask_batch(inputs, 0.5, (1.0, 0.0, 0.0), Rng(4), vocab, "wordpiece")
        loss = mlm_loss(bb, mb, len(vocab), H.H, {"brand": 0})
        T.backward(loss)
        assert np.abs(H.H.grad).max() > 0
        assert all(t.grad is None for t in bb.params.values())
        w = bb.params["layer0.wq"]
        with T.no_grad():
            base = mlm_loss(bb, mb, len(vocab), H.H, {"brand": 0}).item()
            w.data[0, 0] += 1e-3
            bumped = mlm_loss(bb, mb, len(vocab), H.H, {"brand": 0}).item()
            w.data[0, 0] -= 1e-3
        assert bumped != base


class TestHeldOutLoss:
    @pytest.mark.parametrize("kind", ["wordpiece", "char"])
    def test_tuned_prompt_lowers_held_out_loss(self, corpus, kind):
        train, test, _ = corpus
        titles = [ex.title for ex in train + test]
        vocab = build_vocab(titles, 512, reserved_words="is a brand product feature".split())
        bb = Backbone(EncoderConfig(d=32, heads=4, ff_dim=64, vocab_size=len(vocab)), kind, Rng(0))
        pretrain_mlm(bb, titles[:1200], vocab, MLMConfig(epochs=2, batch_size=32), Rng(1))
        brands = [ex for ex in train if ex.gold == "brand"]
        held_out = [ex for ex in test if ex.gold == "brand"][:200]
        init = init_prompt("labels", "brand", bb, vocab)
        tuned, _ = tune_prompt(bb, brands, init, vocab, TuneConfig(epochs=3, batch_size=32), Rng(2))
        cfg = MLMConfig()
        before = prompt_mlm_loss(bb, held_out, init, vocab, cfg, Rng(7))
        after = prompt_mlm_loss(bb, held_out, tuned, vocab, cfg, Rng(7))
        assert after <= before


class TestCheckpoint:
    def test_round_trip(self, small, tmp_path):
        vocab, bbs, _ = small
        pm = init_prompt("dictionary", "product", bbs["char"], vocab)
        pm.save(tmp_path / "p.npz")
        back = PromptMatrix.load(tmp_path / "p.npz")
        assert (back.label, back.backbone, back.init_kind, back.p, back.d) == ("product", "char", "dictionary", 14, 16)
        np.testing.assert_array_equal(back.H.data, pm.H.data)

    def test_stack_offsets(self, small):
        vocab, bbs, _ = small
        prompts = {c: init_prompt("labels", c, bbs["wordpiece"], vocab) for c in CLASSES}
        table, offsets = stack_prompts(prompts)
        assert table.shape == (9, 16)
        assert offsets == {"brand": 0, "product": 3, "feature": 6}
        np.testing.assert_array_equal(table.data[3:6], prompts["product"].H.data)

    def test_stack_missing_class(self, small):
        vocab, bbs, _ = small
        with pytest.raises(ConfigError):
            stack_prompts({"brand": init_prompt("labels", "brand", bbs["wordpiece"], vocab)})
