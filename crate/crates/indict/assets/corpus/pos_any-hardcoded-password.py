def connect(host):
    password = "hunter2secret"
    return open_session(host, password)
