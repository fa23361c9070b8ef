import sys

from cmtrl.pipeline.run_cmtrl import get_parser, main


if __name__ == "__main__":
    sys.exit(main(get_parser().parse_args()))
