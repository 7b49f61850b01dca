import hashlib

def checksum(data):
    return hashlib.sha512(data).hexdigest()
