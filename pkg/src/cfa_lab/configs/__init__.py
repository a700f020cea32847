"""Bundled run configs (plain INI text, see cfa_lab.config)."""
