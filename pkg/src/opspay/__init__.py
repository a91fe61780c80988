"""Offline payment toolkit: server, wallet, and TEE-hosted trusted app state
machines over a canonical codec, plus an adversarial network simulator."""

__version__ = "0.1.0"
