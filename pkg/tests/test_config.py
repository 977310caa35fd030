import pytest

from layerfed.config import DEFAULT_LR_GRID, ScenarioKind, parse_config, parse_config_text
from layerfed.errors import ConfigError
from layerfed.federation import AggregationRule
from layerfed.partition import LayerGroup

C, T, P, R = LayerGroup.COMMON, LayerGroup.TASK, LayerGroup.PERSONAL, LayerGroup.PRETRAINED

MINIMAL = """
[experiment]
name = mini
scenarios = DistributedMultiTaskFL
seed = 3

[dataset]
n_samples = 400
n_tasks = 2
clients = 4

[model]
hidden = 8, 6, 4

[federation]
rounds = 2
batch_size = 8
"""


def test_minimal_config():
    cfg = parse_config_text(MINIMAL)
    assert cfg.name == "mini"
    assert cfg.scenarios == [ScenarioKind.DISTRIBUTED_MULTITASK_FL]
    assert cfg.model.hidden == [8, 6, 4]
    assert cfg.federation.rounds == 2
    # the federation seed follows the experiment seed unless set
    assert cfg.federation.seed == 3
    assert cfg.partition.tags_for(cfg.scenarios[0], cfg.n_layers) == [C, C, T, T]


def test_parse_config_from_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(MINIMAL)
    assert parse_config(path).source_path == str(path)


@pytest.mark.parametrize("name", ["CentralizedSeparate", "centralized_joint", "DistributedSeparate",
                                  "DistributedSeparateFL", "distributed-multi-task-fl"])
def test_scenario_names(name):
    assert isinstance(ScenarioKind.parse(name), ScenarioKind)


def test_unknown_key_names_key_and_line():
    text = MINIMAL.replace("batch_size = 8", "batch_size = 8\nmomentum = 0.9")
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.key == "federation.momentum"
    assert info.value.line == text.splitlines().index("momentum = 0.9") + 1
    assert "federation.momentum" in str(info.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "\n[optimizer]\nkind = adam\n")


def test_bad_value_reports_line():
    text = MINIMAL.replace("rounds = 2", "rounds = two")
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.line == text.splitlines().index("rounds = two") + 1


def test_zero_rounds_rejected():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL.replace("rounds = 2", "rounds = 0"))


def test_centralized_joint_rejects_personal_tags():
    text = MINIMAL.replace("DistributedMultiTaskFL", "CentralizedJoint") + "\n[partition]\ntags = common, common, common, personal\n"
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert "personal" in str(info.value)


def test_out_of_order_tags_rejected():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL + "\n[partition]\ntags = task, common, task, task\n")


def test_grid_expands_to_product():
    cfg = parse_config_text(MINIMAL + "\n[grid]\nlearning_rate = 0.1, 0.03, 0.01\nbatch_size = 8, 16\n")
    points = cfg.grid_points()
    assert len(points) == 6
    assert points[0] == {"learning_rate": 0.1, "batch_size": 8}
    assert points[1] == {"learning_rate": 0.1, "batch_size": 16}
    hp = cfg.hyperparams(points[5], seed=9)
    assert (hp.learning_rate, hp.batch_size, hp.seed) == (0.01, 16, 9)


def test_grid_aggregation_values():
    cfg = parse_config_text(MINIMAL + "\n[grid]\naggregation = weighted_mean, global_share\n")
    points = cfg.grid_points()
    # learning rates fall back to the default five-point grid
    assert len(points) == 5 * 2
    assert [p["aggregation"] for p in points[:2]] == list(AggregationRule)
    assert [p["learning_rate"] for p in points[::2]] == list(DEFAULT_LR_GRID)


def test_explicit_partition_counts():
    cfg = parse_config_text(MINIMAL + "\n[partition]\npretrained = 1\ncommon = 1\npersonal = 1\n")
    assert cfg.partition.tags_for(ScenarioKind.DISTRIBUTED_MULTITASK_FL, 4) == [R, C, T, P]
    assert cfg.partition.tags_for(ScenarioKind.DISTRIBUTED_SEPARATE, 4) == [R, P, P, P]
