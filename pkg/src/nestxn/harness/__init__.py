"""Scenario language, runner, oracles and command line."""

from .runner import Result, Runner, run
from .scenario import Scenario, ScenarioError, load, parse

__all__ = ["Result", "Runner", "Scenario", "ScenarioError", "load", "parse", "run"]
