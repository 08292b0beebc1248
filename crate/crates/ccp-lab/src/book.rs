// Doc-test wiring for the guide chapters (populated with the book).
