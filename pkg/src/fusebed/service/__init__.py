from .app import ServiceState, create_app, load_state, state_checksum

__all__ = ["ServiceState", "create_app", "load_state", "state_checksum"]
