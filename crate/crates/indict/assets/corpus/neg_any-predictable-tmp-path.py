import tempfile

def log(line):
    with tempfile.NamedTemporaryFile("a", delete=False) as f:
        f.write(line)
