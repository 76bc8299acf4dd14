"""Test CLI imports and basic wiring."""

import pytest


@pytest.mark.unit
def test_import_main():
    """The click group can be imported and is callable."""
    from diffound_mad.main import cli

    assert callable(cli)


@pytest.mark.unit
def test_import_commands():
    from diffound_mad.commands import config, data, evaluate, grid, metrics, protocol, train

    for module in (config, data, evaluate, grid, metrics, protocol, train):
        assert callable(module.cli)


@pytest.mark.unit
def test_registered_verbs():
    from diffound_mad.main import cli

    assert set(cli.commands) == {"gen-data", "train", "eval", "grid", "protocol", "metrics", "config", "version"}


@pytest.mark.unit
def test_plots_use_headless_backend():
    import matplotlib

    import diffound_mad.storage.plots  # noqa: F401

    assert matplotlib.get_backend().lower() == "agg"
