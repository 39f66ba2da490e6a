import sys

from app.core.app import create_app

app = create_app()

if __name__ == '__main__':
    # Exit status: 0 ok, 1 runtime failure, 2 usage or config error.
    sys.exit(app.run())
