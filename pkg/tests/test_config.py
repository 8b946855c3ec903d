import textwrap

import pytest

from fedfleet.config import SchemaError, SessionConfig, load_session_config, parse_session_config

SAMPLE = textwrap.dedent("""\
    session_config:
      session_id: lenet_fedat_noniid
      use_gpu: False
      aggregator: fedat
      aggregator_args: None
      client_selection: fedat
      client_selection_args:
        num_tiers: 3
        num_clients_selected_per_tier: 2
      checkpoint_interval: 5
      validation_round_interval: 1
      generate_plots: False

    benchmark_config:
      skip_benchmark: True

    server_training_config:
      model_dir: ./models/LeNet5
      global_model_validation_batch_size: 100
      num_training_rounds: 100

    client_training_config:
      model_id: LeNet5
      model_class: LeNet5_class
      dataset: EMNIST_NONIID3
      epochs: 1
      batch_size: 16
      learning_rate: 0.00005
      train_timeout_duration_s: 300
      loss_function: crossentropy
      loss_function_custom: False
      optimizer: adam
      optimizer_custom: False

    model_config:
      use_custom_dataloader: False
      custom_loader_args: None
      use_custom_trainer: False
      custom_trainer_args: None
      use_custom_validator: False
      custom_validator_args: None

      model_args:
        num_classes: 10
    """)

MINIMAL = textwrap.dedent("""\
    session_config:
      session_id: s
      aggregator: fedavg
      client_selection: fedavg
    server_training_config:
      num_training_rounds: 3
    client_training_config:
      model_id: logreg
      dataset: blobs
    """)


def test_sample_file_parses():
    cfg = parse_session_config(SAMPLE)
    assert cfg.session_id == "lenet_fedat_noniid"
    assert cfg.aggregator == cfg.client_selection == "fedat"
    assert cfg.aggregator_args == {}
    assert cfg.client_selection_args == {"num_tiers": 3, "num_clients_selected_per_tier": 2}
    assert cfg.num_training_rounds == 100 and cfg.termination.rounds == 100
    assert cfg.checkpoint_interval == 5 and cfg.skip_benchmark is True
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (1, 16, 5e-5)
    assert cfg.train_timeout_duration_s == 300.0 and cfg.optimizer == "adam"
    assert cfg.num_classes == 10 and cfg.model_dir == "./models/LeNet5"
    assert cfg.validation_batch_size == 100
    # no built-in network by that name; resolved later when the session starts
    assert cfg.model_family is None


def test_defaults():
    cfg = parse_session_config(MINIMAL)
    assert cfg.checkpoint_interval == 5
    assert cfg.heartbeat_miss_threshold == 5
    assert cfg.deadline_factor == 1.5
    assert cfg.model_family == "logreg" and cfg.state_backend == "memory"
    assert cfg.skip_benchmark is False


def test_missing_strategy_reports_line():
    text = MINIMAL.replace("  aggregator: fedavg\n", "")
    with pytest.raises(SchemaError) as e:
        parse_session_config(text)
    assert e.value.key == "session_config.aggregator"


def test_unknown_key_reports_line():
    text = MINIMAL.replace("  dataset: blobs\n", "  dataset: blobs\n  epohcs: 3\n")
    with pytest.raises(SchemaError) as e:
        parse_session_config(text)
    assert e.value.key == "client_training_config.epohcs"
    assert e.value.line == 10
    assert "line 10" in str(e.value)


@pytest.mark.parametrize("old, new, key", [
    ("  session_id: s\n", "  session_id: s\n  checkpoint_interval: 0\n", "session_config.checkpoint_interval"),
    ("  dataset: blobs\n", "  dataset: blobs\n  epochs: -1\n", "client_training_config.epochs"),
    ("  dataset: blobs\n", "  dataset: blobs\n  learning_rate: fast\n", "client_training_config.learning_rate"),
    ("  dataset: blobs\n", "  dataset: blobs\n  optimizer: lbfgs\n", "client_training_config.optimizer"),
])
def test_bad_values(old, new, key):
    with pytest.raises(SchemaError) as e:
        parse_session_config(MINIMAL.replace(old, new))
    assert e.value.key == key


def test_custom_code_flags_rejected():
    text = SAMPLE.replace("use_custom_trainer: False", "use_custom_trainer: True")
    with pytest.raises(SchemaError, match="custom"):
        parse_session_config(text)


def test_bad_family_rejected():
    text = MINIMAL + "model_config:\n  model_args:\n    family: resnet\n"
    with pytest.raises(SchemaError):
        parse_session_config(text)


def test_termination_and_state_sections():
    extra = (
        "  termination:\n    accuracy_threshold: 0.95\n    time_budget_s: 60\n"
        "  state:\n    backend: durable\n    directory: st\n"
    )
    text = MINIMAL.replace("  session_id: s\n", "  session_id: s\n" + extra)
    cfg = parse_session_config(text)
    assert cfg.termination.accuracy_threshold == 0.95 and cfg.termination.rounds == 3
    assert cfg.termination.time_budget_s == 60.0
    assert cfg.state_backend == "durable" and cfg.state_dir == "st"
    with pytest.raises(SchemaError):
        parse_session_config(text.replace("    directory: st\n", ""))


def test_invalid_yaml():
    with pytest.raises(SchemaError):
        parse_session_config("session_config: [unclosed")
    with pytest.raises(SchemaError):
        parse_session_config("- a list")


def test_relative_paths_resolve_against_file(tmp_path):
    text = MINIMAL.replace("  num_training_rounds: 3\n", "  num_training_rounds: 3\n  validation_data: data/val\n")
    path = tmp_path / "cfg" / "s.yaml"
    path.parent.mkdir()
    path.write_text(text)
    cfg = load_session_config(path)
    assert cfg.validation_data == str(tmp_path / "cfg" / "data" / "val")


def test_dict_roundtrip():
    cfg = parse_session_config(SAMPLE)
    assert SessionConfig.from_dict(cfg.to_dict()) == cfg
