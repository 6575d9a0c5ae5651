"""
Shared pytest configuration.
"""


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo acceptance checks (deselect with -m 'not slow')")
