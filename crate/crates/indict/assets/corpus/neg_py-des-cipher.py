from Crypto.Cipher import AES

def make_cipher(key):
    return AES.new(key, 1)
