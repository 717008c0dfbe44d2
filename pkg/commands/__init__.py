"""CLI subcommands. Each module exposes ``register(subparsers)``."""
from commands import ablate_commands, feature_commands, model_commands, synth_commands

COMMAND_MODULES = (synth_commands, feature_commands, model_commands, ablate_commands)


def register_all(subparsers) -> None:
    for module in COMMAND_MODULES:
        module.register(subparsers)
