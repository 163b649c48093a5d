"""Nested transactions over a simulated multi-site replicated file system."""

from .ids import Pid, SiteId, Tid, home_site, is_ancestor, is_superior, parent

__version__ = "0.1.0"

__all__ = ["Pid", "SiteId", "Tid", "home_site", "is_ancestor", "is_superior", "parent"]
