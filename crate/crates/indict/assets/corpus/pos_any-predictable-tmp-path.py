LOG_PATH = "/tmp/app.log"

def log(line):
    with open(LOG_PATH, "a") as f:
        f.write(line)
