import numpy as np
import pytest

from morphopc.config import SCHEMA, ConfigError, RunConfig
from morphopc.litho import save_kernels


def test_defaults_build_valid_objects():
    cfg = RunConfig()
    g = cfg.generator_config()
    assert g.widths == (32, 64, 128, 256) and g.s == 8
    m = cfg.litho_model()
    assert m.doses == (0.98, 1.0, 1.02) and m.threshold == 0.5 and m.steepness == 50.0
    t = cfg.train_config("finetune")
    assert (t.lr, t.lambda_adv, t.epochs) == (1e-4, 0.01, 10)
    e = cfg.epe_config()
    assert (e.spacing, e.threshold, e.margin) == (10, 4, 8)
    assert cfg.layout_spec().tile_size == 128
    assert cfg.values["sweep"]["s_values"] == [4, 8, 16, 32]


def test_dump_roundtrip_and_hash():
    cfg = RunConfig.from_text("[generator]\nwidths = 8, 16\ns = 4\n[data]\nshape_mix = bar:2, via_array:1\n")
    again = RunConfig.from_text(cfg.dumps())
    assert again.values == cfg.values
    assert again.hash() == cfg.hash() and len(cfg.hash()) == 12
    assert cfg.hash() != RunConfig().hash()
    assert again.layout_spec().shape_mix == {"bar": 2.0, "via_array": 1.0}


def test_every_default_survives_roundtrip():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.dumps()).values == cfg.values
    assert set(cfg.values) == set(SCHEMA)


@pytest.mark.parametrize(
    "text,match",
    [
        ("[nonsense]\na = 1\n", "unknown section"),
        ("[train]\nlearning_rate = 1\n", "unknown key"),
        ("[train]\nlr = fast\n", "bad value"),
        ("[train]\nadversarial = maybe\n", "bad value"),
        ("no section header\n", "header"),
    ],
)
def test_rejects_bad_input(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_text(text)


def test_set_validates_key():
    cfg = RunConfig()
    cfg.set("train", "lr", 0.5)
    assert cfg.train_config("pretrain").lr == 0.5
    with pytest.raises(ConfigError):
        cfg.set("train", "nope", 1)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "absent.ini")


def test_kernel_file_used(tmp_path):
    k = np.ones((3, 3)) / 9
    path = tmp_path / "k.lkrn"
    save_kernels(path, [k], [1.0])
    cfg = RunConfig.from_text(f"[litho]\nkernels = {path}\ndose_min = 0.95\ndose_max = 1.05\n")
    m = cfg.litho_model()
    assert np.array_equal(m.kernels[0], k) and m.doses == (0.95, 1.0, 1.05)


def test_epe_overrides():
    cfg = RunConfig.from_text("[epe]\nspacing = 6\nthreshold = auto\n[litho]\npitch = 2\n")
    e = cfg.epe_config()
    assert e.spacing == 6 and e.threshold == 8
