import pytest

from mobidiary.config import SCHEMA, ConfigError, RunConfig


def _write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_defaults():
    cfg = RunConfig()
    assert cfg["model.d_model"] == 128 and cfg["model.patch.P"] == 25
    assert cfg["train.lr"] == 1e-4 and cfg["train.weight_decay"] == 1e-3 and cfg["train.batch_size"] == 16
    assert cfg["decode.t_max"] == 50
    assert all(cfg[f"ablation.{k}"] for k in ("patch", "pe", "placement", "convffn"))


def test_dotted_keys_and_tables_agree(tmp_path):
    dotted = RunConfig.load(_write(tmp_path, "model.patch.P = 10\nmodel.patch.S = 5\ntrain.epochs = 3\n"))
    tables = RunConfig.from_mapping({"model": {"patch": {"P": 10, "S": 5}}, "train": {"epochs": 3}})
    assert dotted == tables
    assert dotted["model.patch.P"] == 10


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="ablation.pes"):
        RunConfig.load(_write(tmp_path, "ablation.pes = false\n"))


@pytest.mark.parametrize("text", [
    "model.d_model = 'big'\n",
    "model.d_model = 127\n",
    "model.dw_kernel = 4\n",
    "model.n_heads = 3\n",
    "train.lr = -1.0\n",
    "train.batch_size = 0\n",
    "ablation.pe = 1\n",
    "model.patch.P = 5\nmodel.patch.S = 6\n",
    "model.dtype = 'float16'\n",
    "train.epochs = true\n",
])
def test_bad_values_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        RunConfig.load(_write(tmp_path, text))


def test_syntax_error_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(_write(tmp_path, "model.d_model = \n"))
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.toml")


def test_model_and_train_configs():
    cfg = RunConfig.from_mapping({"model": {"n_final_pwconv": 2}, "ablation": {"pe": False}, "train": {"seed": 7}})
    mc = cfg.model_config(D=3, C=30, num_placements=3)
    assert (mc.encoder.D, mc.encoder.C, mc.encoder.n_final_pwconv) == (3, 30, 2)
    assert mc.encoder.enable_pe is False and mc.t_max == 50
    tc = cfg.train_config(epochs=2)
    assert tc.seed == 7 and tc.epochs == 2 and tc.enable_pe is False


def test_with_values_revalidates():
    cfg = RunConfig().with_values(**{"train.seed": 3})
    assert cfg["train.seed"] == 3
    with pytest.raises(ConfigError):
        RunConfig().with_values(**{"model.d_model": 15})


def test_schema_covers_documented_keys():
    for key in ("model.n_sa_layers", "model.n_text_layers", "model.n_convffn_blocks", "model.pe_base_sensor",
                "model.pe_base_text", "train.seed", "ablation.placement"):
        assert key in SCHEMA
