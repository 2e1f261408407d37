"""Build a small real transformer on disk for offline protocol tests.

No pretrained weights are downloadable in this environment, so the fixture
constructs a genuine 2-layer BERT with seeded random weights, saves it with
its tokenizer, and loads it back through the standard transformers path --
the same code path a published checkpoint would take.
"""
import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizerFast

VOCAB = (
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    + list("abcdefghijklmnopqrstuvwxyz")
    + ["##" + c for c in "abcdefghijklmnopqrstuvwxyz"]
    + ["a", "simulation", "using", "the", "method", "on", "under", "loading",
       "aiming", "to", "predict", "final", "fracture", "pattern", "steel",
       "phase", "field", "rule", "based", "axial", "biaxial", "time", "failure"]
)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny-bert")
    vocab_file = path / "vocab.txt"
    seen = []
    for token in VOCAB:
        if token not in seen:
            seen.append(token)
    vocab_file.write_text("\n".join(seen) + "\n", encoding="utf-8")
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file), do_lower_case=True)
    torch.manual_seed(1234)
    config = BertConfig(
        vocab_size=len(seen),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertModel(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)
