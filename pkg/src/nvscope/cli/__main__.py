"""python -m nvscope.cli entry point."""
from . import main

if __name__ == "__main__":
    raise SystemExit(main())
