# Initializes the SQLite run registry for dlsense
import os
import sys

from dlsense import db

if __name__ == '__main__':
    out = sys.argv[1] if len(sys.argv) > 1 else 'out'
    db.configure(os.path.join(out, 'runs.db'))
    db.init_db()
    print(f'Initialized SQLite run registry at {db.DB_PATH}')
