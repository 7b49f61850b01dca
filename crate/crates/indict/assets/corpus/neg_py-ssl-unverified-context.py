import ssl

def secure_context():
    return ssl.create_default_context()
