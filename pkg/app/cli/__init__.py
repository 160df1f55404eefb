from app.cli import evaluation_commands, prepare_commands, train_commands
from app.cli.dependencies import CliArgumentParser


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(prog="shuffleunet", description="3D ShuffleUNet super-resolution pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    prepare_commands.register(subparsers)
    train_commands.register(subparsers)
    evaluation_commands.register(subparsers)
    return parser


__all__ = ["build_parser"]
