def find_user(cursor, name):
    cursor.execute("SELECT id FROM users WHERE name = %s", (name,))
