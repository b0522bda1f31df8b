"""Config file parsing and STAGE_* environment overrides."""

from __future__ import annotations

import pytest

from stagekit.config import build_settings, load_config, load_settings, parse_kv
from stagekit.errors import UsageError


class TestParseKv:
    def test_basic(self):
        raw = parse_kv("a = 1\nb=two\n# comment\n\n  c =  3  \n")
        assert raw == {"a": "1", "b": "two", "c": "3"}

    def test_missing_equals_rejected(self):
        with pytest.raises(UsageError):
            parse_kv("oops\n")


class TestLoadConfig:
    def test_file_values(self, tmp_path):
        cfg = tmp_path / "stage.conf"
        cfg.write_text("global_limit = 2\nstaging_dir = /data/stage\n")
        raw = load_config(cfg, env={})
        assert raw["global_limit"] == "2"
        assert raw["staging_dir"] == "/data/stage"

    def test_env_overrides_file(self, tmp_path):
        cfg = tmp_path / "stage.conf"
        cfg.write_text("global_limit = 2\n")
        raw = load_config(cfg, env={"STAGE_GLOBAL_LIMIT": "5"})
        assert raw["global_limit"] == "5"

    def test_env_alone(self):
        raw = load_config(None, env={"STAGE_QUOTA_BYTES": "100"})
        assert raw == {"quota_bytes": "100"}

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "stage.conf"
        cfg.write_text("global_limti = 2\n")
        with pytest.raises(UsageError):
            load_config(cfg, env={})

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            load_config(tmp_path / "nope.conf", env={})


class TestBuildSettings:
    def test_defaults(self):
        s = build_settings({})
        assert s.scheduler.global_limit == 8
        assert s.scheduler.per_node_limit == 4
        assert s.scheduler.quota_bytes is None
        assert s.retry.max_checksum_retries == 3
        assert s.credential_policy.lifetime_s == 259_200
        assert s.credential_policy.refresh_margin_s == 86_400
        assert s.verify_mode == "streamed"

    def test_full_round(self, tmp_path):
        cfg = tmp_path / "stage.conf"
        cfg.write_text(
            "global_limit = 16\n"
            "per_node_limit = 2\n"
            "quota_bytes = 1000000\n"
            "quota_override = true\n"
            "ewma_alpha = 0.5\n"
            "unknown_rate_prior = 2000000\n"
            "staging_dir = /tmp/st\n"
            "credential_lifetime_s = 100\n"
            "refresh_margin_s = 10\n"
            "max_checksum_retries = 5\n"
            "max_transport_retries = 7\n"
            "verify_mode = posthoc\n"
        )
        s = load_settings(cfg, env={})
        assert s.scheduler.global_limit == 16
        assert s.scheduler.quota_bytes == 1_000_000
        assert s.scheduler.quota_override is True
        assert s.scheduler.ewma_alpha == 0.5
        assert s.retry.max_checksum_retries == 5
        assert s.retry.max_transport_retries == 7
        assert s.credential_policy.lifetime_s == 100
        assert str(s.staging_dir) == "/tmp/st"
        assert s.verify_mode == "posthoc"

    @pytest.mark.parametrize(
        "key,value",
        [
            ("global_limit", "many"),
            ("quota_override", "probably"),
            ("ewma_alpha", "0"),
            ("verify_mode", "psychic"),
            ("per_node_limit", "99"),  # above global_limit default 8
        ],
    )
    def test_bad_values_are_usage_errors(self, key, value):
        with pytest.raises(UsageError):
            build_settings({key: value})
