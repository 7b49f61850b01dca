import os

def restrict(path):
    os.chmod(path, 0o600)
