import pytest
import yaml

from src.config import parse_config

# --- Shared Test Data ---

# Small GQA model so whole simulations and searches finish in well under a second
MOCK_RAW_CONFIG = {
    "model": {"name": "tiny-gqa", "hidden_size": 1024, "intermediate_size": 2816,
              "num_query_heads": 16, "num_kv_heads": 4, "num_layers": 4},
    "hardware": {"name": "test-accelerator", "peak_flops": 300.0e12, "peak_mem_bw": 1.6e12,
                 "peak_comm_bw": 90.0e9},
    "scenario": {"seq_len": 128, "gen_len": 8, "num_requests": 40, "arrival_rate": 2.0,
                 "rng_seed": 7},
    "slo": {"ttft_goal": 50, "tpot_goal": 5},
    "search": {"max_instances": 2, "tp_sizes": [1], "max_batch_prefill": 2, "max_batch_decode": 4},
    "tuning": {"epsilon": 0.5},
}

MOCK_ARCH = "1p1d"
MOCK_RATES = "1:3:1"


# --- Shared Fixtures ---

@pytest.fixture
def planner_config():
    """Validated PlannerConfig built from MOCK_RAW_CONFIG."""
    return parse_config(MOCK_RAW_CONFIG)


@pytest.fixture
def config_file(tmp_path):
    """MOCK_RAW_CONFIG written as a YAML file."""
    path = tmp_path / "planner.yaml"
    path.write_text(yaml.safe_dump(MOCK_RAW_CONFIG, sort_keys=False), encoding="utf-8")
    return str(path)


# Make it a fixture so it's easily available to tests
@pytest.fixture
def create_argv_fixture(config_file, tmp_path):
    """Fixture factory to create argv lists for main()."""
    def _create_argv(command, *command_args, config=None, out_dir=None, extra_global=()):
        """Global flags pointing at the test config and a temporary output directory."""
        argv = [
            "--config", config or config_file,
            "--out-dir", out_dir or str(tmp_path / "results"),
            *extra_global,
            command,
            *command_args,
        ]
        return argv
    return _create_argv
