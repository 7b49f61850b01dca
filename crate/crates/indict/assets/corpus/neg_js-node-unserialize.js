function restore(payload) {
  return JSON.parse(payload);
}
