def find_user(cursor, user_id):
    cursor.execute("SELECT name FROM users WHERE id = " + user_id)
