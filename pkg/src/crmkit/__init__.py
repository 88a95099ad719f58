"""Rewrite underperforming CRM message templates and judge the rewrites."""
__version__ = "0.1.0"
