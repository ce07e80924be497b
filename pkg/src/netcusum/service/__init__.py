"""FastAPI service exposing the monitoring library."""
