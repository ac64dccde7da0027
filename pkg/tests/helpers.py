"""Small fixtures shared by the CLI and checkpoint tests."""

TINY_CONFIG = """\
# tiny dimensions so a CLI round trip takes a few seconds
C = 8
D = 8
K = 8
K_prime = 8
d = 2
g = 2
embed_dim = 8
train_count = 64
val_count = 32
epochs = 1
batch_size = 32
"""


def write_config(tmp_path, extra: str = "") -> str:
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG + extra)
    return str(path)
