import os

def client():
    return make_client(os.environ["AWS_ACCESS_KEY_ID"])
