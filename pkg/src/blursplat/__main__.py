"""Allow ``python -m blursplat`` to run the CLI."""

from .cli import main

main()
