import os

def connect(host):
    password = os.environ["APP_PASSWORD"]
    return open_session(host, password)
