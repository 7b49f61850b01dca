function makeHandler() {
  return (event) => event.type;
}
