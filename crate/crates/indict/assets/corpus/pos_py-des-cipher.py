from Crypto.Cipher import DES

def make_cipher(key):
    return DES.new(key, 1)
