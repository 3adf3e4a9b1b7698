# tests/test_config.py
import numpy as np
import pytest
import yaml

from _paths import CONFIG_DIR
from config import DEFAULTS, build_client_envs, load_run_config, loss_spec, parse_override, resolve_config_path, validate
from env import MultisetEnv, PhyloEnv, SequenceEnv, save_sites
from errors import ConfigError, ShardError


def write_yaml(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def minimal(**extra):
    raw = {"experiment": "t", "env": {"kind": "multiset", "multiset": {"dict_size": 3, "target_size": 2}}}
    raw.update(extra)
    return raw


def test_bundled_configs_validate():
    for path in sorted(CONFIG_DIR.glob("*.yaml")):
        cfg = load_run_config(path)
        assert cfg.name == path.stem
        assert len(build_client_envs(cfg)) == cfg.n_clients


def test_tiny_defaults_are_filled():
    cfg = load_run_config("tiny")
    assert cfg.source.endswith("tiny.yaml")
    assert cfg.n_clients == 2
    assert cfg.env_kind == "multiset"
    assert cfg.get("train.hidden") == DEFAULTS["train"]["hidden"]
    assert cfg.get("aggregate.epsilon") == 0.5
    assert cfg.get("eval.guard") == 5_000_000
    spec = loss_spec(cfg)
    assert (spec.kind, spec.epsilon) == ("CB", 0.1)
    assert spec.weights is None
    assert loss_spec(load_run_config("tiny", ["loss.weights=[2, 1]"])).weights == (2.0, 1.0)


def test_resolve_config_path(tmp_path):
    assert resolve_config_path("grid") == CONFIG_DIR / "grid.yaml"
    path = write_yaml(tmp_path, minimal())
    assert resolve_config_path(path) == path
    with pytest.raises(ConfigError):
        resolve_config_path(tmp_path / "nope.yaml")


def test_overrides_are_yaml_scalars():
    assert parse_override("train.epochs=5") == (["train", "epochs"], 5)
    assert parse_override("aggregate.weights=[1, 2.5]") == (["aggregate", "weights"], [1, 2.5])
    assert parse_override("loss.kind=TB") == (["loss", "kind"], "TB")
    with pytest.raises(ConfigError):
        parse_override("train.epochs")
    cfg = load_run_config("tiny", ["train.epochs=5", "loss.kind=TB", "aggregate.weights=[1, 2]"])
    assert cfg.get("train.epochs") == 5
    assert cfg.get("loss.kind") == "TB"
    again = cfg.with_overrides(["seed=3"])
    assert again.seed == 3
    assert again.source == cfg.source
    assert again.get("train.epochs") == 5


@pytest.mark.parametrize(
    "override, key",
    [
        ("train.epoch=5", "train.epoch"),
        ("loss.kind=AB", "loss.kind"),
        ("loss.kind=FL", "loss.kind"),
        ("train.batch_size=1", "train.batch_size"),
        ("train.lr=0", "train.lr"),
        ("train.backend=gin", "train.backend"),
        ("train.hidden=[]", "train.hidden"),
        ("aggregate.epsilon=1.5", "aggregate.epsilon"),
        ("aggregate.weights=[1]", "aggregate.weights"),
        ("aggregate.weights=[1, -1]", "aggregate.weights"),
        ("aggregate.baselines=[magic]", "aggregate.baselines"),
        ("eval.samples=5", "eval.samples"),
        ("clients.n=0", "clients.n"),
        ("seed=-1", "seed"),
        ("seed=true", "seed"),
        ("env.kind=maze", "env.kind"),
        ("sweep.noise=[-0.1]", "sweep.noise"),
        ("sweep.loss=[AB]", "sweep.loss"),
        ("sweep.clients=[]", "sweep.clients"),
    ],
)
def test_bad_values_name_their_key(override, key):
    with pytest.raises(ConfigError) as e:
        load_run_config("tiny", [override])
    assert e.value.key == key
    assert e.value.exit_code == 2


def test_required_keys():
    with pytest.raises(ConfigError) as e:
        validate({"env": {"kind": "multiset"}})
    assert e.value.key == "experiment"
    with pytest.raises(ConfigError) as e:
        validate({"experiment": "t"})
    assert e.value.key == "env.kind"


def test_bad_files(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("just a string\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(scalar)


def test_grid_needs_one_beacon_list_per_client():
    with pytest.raises(ConfigError) as e:
        load_run_config("grid", ["clients.n=3"])
    assert e.value.key == "env.grid.beacons"
    with pytest.raises(ConfigError) as e:
        load_run_config("grid", ["env.grid.beacons=[[[1, 1]], [1, 2]]"])
    assert e.value.key == "env.grid.beacons.1"


def test_phylo_client_alias():
    cfg = load_run_config("phylo")
    assert cfg.n_clients == 3
    with pytest.raises(ConfigError) as e:
        load_run_config("phylo", ["clients.n=2"])
    assert e.value.key == "env.phylo.clients"
    assert load_run_config("phylo", ["clients.n=3"]).n_clients == 3
    with pytest.raises(ConfigError):
        load_run_config("phylo", ["env.phylo.sites=2"])


def test_multiset_clients_differ_only_in_reward(tmp_path):
    cfg = validate(minimal(clients={"n": 3}, output_dir=str(tmp_path)))
    envs = build_client_envs(cfg)
    assert all(isinstance(e, MultisetEnv) for e in envs)
    assert len({e.fingerprint() for e in envs}) == 1
    np.testing.assert_array_equal(envs[1].values, np.random.default_rng(1).uniform(0.0, 1.0, 3))
    assert not np.array_equal(envs[0].values, envs[1].values)
    assert cfg.out_dir() == tmp_path / "t"
    assert cfg.out_dir().is_dir()


def test_sequence_scores():
    cfg = validate({"experiment": "s", "env": {"kind": "sequence", "sequence": {"max_len": 4, "num_tokens": 3}}, "clients": {"n": 2}})
    envs = build_client_envs(cfg)
    assert all(isinstance(e, SequenceEnv) for e in envs)
    for e in envs:
        assert ((e.position_scores >= 0) & (e.position_scores <= 1)).all()
        assert ((e.token_scores >= -1) & (e.token_scores <= 1)).all()


def test_phylo_shards_cover_all_sites():
    cfg = load_run_config("phylo", ["env.phylo.sites=50"])
    envs = build_client_envs(cfg)
    assert all(isinstance(e, PhyloEnv) for e in envs)
    assert sum(e.sites.shape[1] for e in envs) == 50
    assert all(e.params.n_clients == 3 for e in envs)
    again = build_client_envs(cfg)
    for a, b in zip(envs, again):
        np.testing.assert_array_equal(a.sites, b.sites)


def test_phylo_sites_file(tmp_path):
    data = np.random.default_rng(0).integers(0, 4, size=(5, 9))
    path = tmp_path / "sites.txt"
    save_sites(path, data)
    cfg = load_run_config("phylo", [f"env.phylo.sites_file={path}"])
    envs = build_client_envs(cfg)
    np.testing.assert_array_equal(np.concatenate([e.sites for e in envs], axis=1), data)
    with pytest.raises(ConfigError):
        build_client_envs(load_run_config("phylo", [f"env.phylo.sites_file={path}", "env.phylo.leaves=4"]))
    with pytest.raises(ConfigError):
        load_run_config("phylo", [f"env.phylo.sites_file={tmp_path / 'missing.txt'}"])


def test_too_few_sites_for_shards(tmp_path):
    data = np.random.default_rng(0).integers(0, 4, size=(5, 2))
    path = tmp_path / "sites.txt"
    save_sites(path, data)
    cfg = load_run_config("phylo", [f"env.phylo.sites_file={path}", "clients.n=3"])
    with pytest.raises((ConfigError, ShardError)):
        build_client_envs(cfg)
