import tempfile

def scratch_file():
    return tempfile.mktemp()
