# local imports
from .cli import cli


# If main, run the command line interface
if __name__ == "__main__":
    cli(prog_name="wavesep")
