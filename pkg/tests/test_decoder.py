import pytest
import torch

from fmri2text.data import CAPTION_TEMPLATES, CANONICAL_INSTRUCTION, VideoClip
from fmri2text.decoder import (CaptionError, CaptionOracle, DecoderConfig, MockCaptionProvider, ToyDecoder, Vocab,
                               assemble_prompt, collate, generate, generate_batch, normalize_text,
                               surrogate_caption)
from fmri2text.losses import ce_loss
from fmri2text.numerics import ValidationError
from gradutil import module_grad_check


@pytest.fixture(scope="module")
def vocab():
    return Vocab.default()


def test_normalization():
    assert normalize_text("In the video, a person is playing squash.") == \
        "in the video , a person is playing squash ."


def test_vocab_roundtrip_and_unknowns(vocab):
    ids = vocab.encode("a person is playing squash .")
    assert vocab.decode(ids) == "a person is playing squash ."
    with pytest.raises(ValidationError, match="xylophone"):
        vocab.encode("a xylophone")
    for instruction, pattern in CAPTION_TEMPLATES.items():
        vocab.encode(instruction)


def test_prompt_layout_and_loss_mask(vocab):
    media = torch.zeros(3, 8)
    p = assemble_prompt(media, CANONICAL_INSTRUCTION, "a person .", vocab)
    ids = p.input_ids.tolist()
    n_instr = len(vocab.encode(CANONICAL_INSTRUCTION))
    assert ids[0] == vocab.bos and ids[n_instr + 1] == vocab.sep and ids[-1] == vocab.eos
    assert p.loss_mask.sum() == len(vocab.encode("a person .")) + 1
    assert not p.loss_mask[: n_instr + 2].any()
    with pytest.raises(ValidationError):
        assemble_prompt(media, "   ", "x", vocab)


def test_collate_shift_and_padding(vocab):
    media = torch.zeros(2, 8)
    a = assemble_prompt(media, CANONICAL_INSTRUCTION, "a", vocab)
    b = assemble_prompt(media, CANONICAL_INSTRUCTION, "a person is", vocab)
    m, ids, tgt, mask = collate([a, b], vocab.pad)
    assert ids.shape == tgt.shape == mask.shape and m.shape[0] == 2
    assert torch.equal(tgt[1, :-1][mask[1, :-1]], b.input_ids[1:][b.loss_mask[1:]])
    assert (ids[0, len(a.input_ids):] == vocab.pad).all()


def _tiny_decoder(vocab, width=16):
    torch.manual_seed(0)
    return ToyDecoder(DecoderConfig(width=width, depth=1, heads=2, max_len=40, max_new_tokens=12), len(vocab))


def test_decoder_is_causal(vocab):
    dec = _tiny_decoder(vocab)
    media = torch.randn(1, 3, 16)
    ids = torch.tensor([[vocab.bos, 7, 9, 11]])
    a = dec(media, ids)
    ids2 = ids.clone()
    ids2[0, 3] = 12
    b = dec(media, ids2)
    assert torch.allclose(a[:, :3], b[:, :3]) and not torch.allclose(a[:, 3], b[:, 3])
    with pytest.raises(ValidationError):
        dec(torch.randn(1, 39, 16), ids)


def test_overfit_and_greedy_generation(vocab):
    dec = _tiny_decoder(vocab, width=32)
    media = torch.randn(2, 3, 32)
    answers = ["a person is playing squash .", "a person is walking a dog ."]
    prompts = [assemble_prompt(m, CANONICAL_INSTRUCTION, a, vocab) for m, a in zip(media, answers)]
    opt = torch.optim.Adam(dec.parameters(), lr=3e-3)
    for _ in range(150):
        m, ids, tgt, mask = collate(prompts, vocab.pad)
        loss = ce_loss(dec(m, ids), tgt, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
    out = generate_batch(media, CANONICAL_INSTRUCTION, dec, vocab)
    assert [o.text for o in out] == answers and not any(o.truncated for o in out)
    single = generate(media[0], CANONICAL_INSTRUCTION, dec, vocab)
    assert single.text == answers[0]


def test_generation_truncation_flag(vocab):
    dec = _tiny_decoder(vocab)
    with torch.no_grad():
        dec.head.bias.fill_(-100.0)
        dec.head.bias[vocab.stoi["a"]] = 100.0
    out = generate(torch.randn(3, 16), CANONICAL_INSTRUCTION, dec, vocab, max_len=5)
    assert out.truncated and out.text == "a a a a a"


def test_caption_oracle_modes():
    oracle = CaptionOracle(["playing squash"])
    assert oracle.caption(0, CANONICAL_INSTRUCTION) == "In the video, a person is playing squash."
    mock = MockCaptionProvider("a person is surfing.")
    ext = CaptionOracle(["playing squash"], mode="external", provider=mock)
    clip = VideoClip(torch.zeros(1, 2, 2, 3).numpy(), 0)
    assert surrogate_caption(clip, CANONICAL_INSTRUCTION, ext) == "a person is surfing."
    assert mock.requests[0]["instruction"] == CANONICAL_INSTRUCTION
    broken = CaptionOracle(["x"], mode="external", provider=lambda req: {})
    with pytest.raises(CaptionError):
        broken.caption(0, CANONICAL_INSTRUCTION)
    with pytest.raises(ValidationError):
        CaptionOracle(mode="external")


def test_decoder_head_gradients(vocab, float64):
    dec = _tiny_decoder(vocab).double()
    media = torch.randn(1, 2, 16, dtype=torch.float64)
    ids = torch.tensor([[vocab.bos, 7, 9]])
    tgt = torch.tensor([[7, 9, vocab.eos]])
    hidden = dec.norm(torch.cat([media, dec.embed(ids)], 1) + dec.pos[:5])[:, 2:].detach()
    report = module_grad_check(dec.head, lambda logits: ce_loss(logits, tgt), hidden, max_coords=60)
    assert report.passed, str(report)


def test_inference_prompt_has_no_loss_positions(vocab):
    p = assemble_prompt(torch.zeros(2, 8), CANONICAL_INSTRUCTION, None, vocab)
    assert not p.loss_mask.any() and p.input_ids[-1] == vocab.sep


@pytest.mark.parametrize("text", ["In the video, a person is playing squash.", "What   is IN the video ?",
                                  "a person , walking a dog ."])
def test_detokenize_roundtrip(vocab, text):
    assert vocab.decode(vocab.encode(text)) == normalize_text(text)


def test_media_changes_answer_logits(vocab):
    dec = _tiny_decoder(vocab)
    ids = torch.tensor([[vocab.bos, 7, vocab.sep, 9]])
    media = torch.randn(1, 3, 16)
    other = media.clone()
    other[0, 1] += 1.0
    assert not torch.allclose(dec(media, ids)[:, -1], dec(other, ids)[:, -1])
    assert torch.equal(dec(media, ids), dec(media.clone(), ids.clone()))


@pytest.mark.parametrize("pos", [0, 2, 4])
def test_causality_every_position(vocab, pos):
    dec = _tiny_decoder(vocab)
    ids = torch.randint(0, len(vocab), (1, 6), generator=torch.Generator().manual_seed(pos))
    base = dec(torch.ones(1, 2, 16), ids)
    ids2 = ids.clone()
    ids2[0, pos] = (ids2[0, pos] + 1) % len(vocab)
    out = dec(torch.ones(1, 2, 16), ids2)
    assert torch.equal(out[:, :pos], base[:, :pos])


def test_zero_length_generation_is_truncated(vocab):
    out = generate(torch.randn(3, 16), CANONICAL_INSTRUCTION, _tiny_decoder(vocab), vocab, max_len=0)
    assert out.text == "" and out.truncated


def test_template_oracle_is_deterministic():
    oracle = CaptionOracle(["playing squash", "walking a dog"])
    assert oracle.caption(1, CANONICAL_INSTRUCTION) == oracle.caption(1, CANONICAL_INSTRUCTION)


def test_loss_ignores_non_answer_logits(vocab):
    media = torch.zeros(2, 16)
    p = assemble_prompt(media, CANONICAL_INSTRUCTION, "a person .", vocab)
    m, ids, tgt, mask = collate([p], vocab.pad)
    logits = torch.randn(1, ids.shape[1], len(vocab), requires_grad=True)
    ce_loss(logits, tgt, mask).backward()
    assert torch.equal(logits.grad[~mask], torch.zeros_like(logits.grad[~mask]))
    assert logits.grad[mask].abs().sum() > 0
