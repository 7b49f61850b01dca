import tempfile

def scratch_file():
    fd, path = tempfile.mkstemp()
    return path
